//! Corpus ingestion, validation, splitting and canonical JSONL storage.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::text::word_count;

/// File name of the canonical corpus inside a corpus directory.
pub const CORPUS_FILE: &str = "corpus.jsonl";

/// Meta key set when the summary is not shorter than the article.
pub const LENGTH_FLAG_KEY: &str = "length_flag";
pub const LENGTH_FLAG_VALUE: &str = "summary_ge_article";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus file {0} is empty")]
    Empty(String),
    #[error("duplicate document id {id:?} on lines {first} and {second}")]
    DuplicateId { id: String, first: usize, second: usize },
    #[error("invalid document {id:?}: {reason}")]
    InvalidDocument { id: String, reason: String },
    #[error("split sizes {requested} exceed corpus size {available} (short by {deficit})")]
    SplitTooLarge {
        requested: usize,
        available: usize,
        deficit: usize,
    },
    #[error("unknown document id {0:?}")]
    UnknownDocument(String),
}

/// One (note, summary) record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub article: String,
    pub reference_summary: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    pub fn new(id: impl Into<String>, article: impl Into<String>, summary: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            article: article.into(),
            reference_summary: summary.into(),
            meta: BTreeMap::new(),
        }
    }

    /// Checks the hard invariants (non-empty fields).
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: &str| CorpusError::InvalidDocument {
            id: self.id.clone(),
            reason: reason.to_owned(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id"));
        }
        if self.article.trim().is_empty() {
            return Err(invalid("empty article"));
        }
        if self.reference_summary.trim().is_empty() {
            return Err(invalid("empty reference_summary"));
        }
        Ok(())
    }

    /// True when the summary has fewer words than the article.
    pub fn summary_shorter(&self) -> bool {
        word_count(&self.reference_summary) < word_count(&self.article)
    }

    fn apply_length_flag(&mut self) {
        if self.summary_shorter() {
            if self.meta.get(LENGTH_FLAG_KEY).map(String::as_str) == Some(LENGTH_FLAG_VALUE) {
                self.meta.remove(LENGTH_FLAG_KEY);
            }
        } else {
            self.meta
                .insert(LENGTH_FLAG_KEY.to_owned(), LENGTH_FLAG_VALUE.to_owned());
        }
    }
}

/// A per-line problem recorded during ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub errors: Vec<LineError>,
}

impl Corpus {
    /// Builds a corpus from in-memory documents, enforcing id uniqueness.
    pub fn from_documents(docs: Vec<Document>) -> Result<Self, CorpusError> {
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut documents = Vec::with_capacity(docs.len());
        for (i, mut doc) in docs.into_iter().enumerate() {
            doc.validate()?;
            if let Some(first) = seen.insert(doc.id.clone(), i + 1) {
                return Err(CorpusError::DuplicateId {
                    id: doc.id,
                    first,
                    second: i + 1,
                });
            }
            doc.apply_length_flag();
            documents.push(doc);
        }
        Ok(Self {
            documents,
            errors: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    pub fn require(&self, id: &str) -> Result<&Document, CorpusError> {
        self.get(id)
            .ok_or_else(|| CorpusError::UnknownDocument(id.to_owned()))
    }

    /// Canonical JSONL form: one document per line, LF endings.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for doc in &self.documents {
            out.push_str(&serde_json::to_string(doc).expect("document serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes the canonical form to `<dir>/corpus.jsonl`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(CORPUS_FILE);
        let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| io_err(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self, CorpusError> {
        ingest(&dir.join(CORPUS_FILE))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads a JSONL corpus file.
///
/// Malformed lines and invalid documents are recorded in `Corpus::errors`
/// and skipped; a duplicate id or an empty file is a hard error.
pub fn ingest(path: &Path) -> Result<Corpus, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    ingest_str(&raw, &path.display().to_string())
}

pub fn ingest_str(raw: &str, origin: &str) -> Result<Corpus, CorpusError> {
    if raw.trim().is_empty() {
        return Err(CorpusError::Empty(origin.to_owned()));
    }
    let mut corpus = Corpus::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut doc: Document = match serde_json::from_str(line) {
            Ok(d) => d,
            Err(e) => {
                corpus.errors.push(LineError {
                    line: line_no,
                    message: format!("malformed JSON: {e}"),
                });
                continue;
            }
        };
        if let Err(e) = doc.validate() {
            corpus.errors.push(LineError {
                line: line_no,
                message: e.to_string(),
            });
            continue;
        }
        if let Some(first) = seen.insert(doc.id.clone(), line_no) {
            return Err(CorpusError::DuplicateId {
                id: doc.id,
                first,
                second: line_no,
            });
        }
        doc.apply_length_flag();
        corpus.documents.push(doc);
    }
    Ok(corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    pub test: Vec<Document>,
    pub seed: u64,
}

impl CorpusSplit {
    pub fn partition(&self, name: &str) -> Option<&[Document]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Seeded uniform sample of disjoint train/valid/test partitions.
///
/// Documents left over after the requested sizes are unused.
pub fn split(corpus: &Corpus, sizes: SplitSizes, seed: u64) -> Result<CorpusSplit, CorpusError> {
    let available = corpus.len();
    let requested = sizes.total();
    if requested > available {
        return Err(CorpusError::SplitTooLarge {
            requested,
            available,
            deficit: requested - available,
        });
    }
    let mut order: Vec<usize> = (0..available).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let take = |range: std::ops::Range<usize>| -> Vec<Document> {
        order[range]
            .iter()
            .map(|&i| corpus.documents[i].clone())
            .collect()
    };
    let train_end = sizes.train;
    let valid_end = train_end + sizes.valid;
    Ok(CorpusSplit {
        train: take(0..train_end),
        valid: take(train_end..valid_end),
        test: take(valid_end..requested),
        seed,
    })
}
