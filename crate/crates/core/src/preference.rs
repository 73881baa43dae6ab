//! Preference pair assembly and JSONL emission for DPO trainers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, CorpusError};
use crate::synthesis::{ConstraintReport, SynthesisResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Synthesized,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub document_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub constraint_flags: Option<ConstraintReport>,
    pub source: PairSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagPolicy {
    KeepFlagged,
    DropFlagged,
}

impl std::str::FromStr for FlagPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keep_flagged" => Ok(FlagPolicy::KeepFlagged),
            "drop_flagged" => Ok(FlagPolicy::DropFlagged),
            other => Err(format!("unknown policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AssemblyReport {
    pub kept: usize,
    pub dropped_flagged: usize,
    pub dropped_degenerate: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum PreferenceError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("no pairs to emit")]
    Empty,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// One pair per synthesis result; flagged results follow `policy`, and
/// pairs whose rejected text equals the chosen text are dropped.
pub fn assemble(
    corpus: &Corpus,
    synth: &[SynthesisResult],
    policy: FlagPolicy,
) -> Result<(Vec<PreferencePair>, AssemblyReport), PreferenceError> {
    let mut report = AssemblyReport::default();
    let mut pairs = Vec::new();
    for result in synth {
        let doc = corpus.require(&result.document_id)?;
        if policy == FlagPolicy::DropFlagged && !result.validation.is_clean() {
            report.dropped_flagged += 1;
            continue;
        }
        if result.hallucinated_summary == doc.reference_summary {
            report.dropped_degenerate += 1;
            report.warnings.push(format!(
                "{}: hallucinated summary equals the reference; pair dropped",
                doc.id
            ));
            continue;
        }
        pairs.push(PreferencePair {
            document_id: doc.id.clone(),
            prompt: doc.article.clone(),
            chosen: doc.reference_summary.clone(),
            rejected: result.hallucinated_summary.clone(),
            constraint_flags: Some(result.validation),
            source: PairSource::Synthesized,
        });
    }
    report.kept = pairs.len();
    Ok((pairs, report))
}

#[derive(Debug, Serialize, Deserialize)]
struct PairLine {
    prompt: String,
    chosen: String,
    rejected: String,
    document_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pair_count: usize,
    /// SHA-256 of the emitted file bytes.
    pub content_digest: String,
    /// Digest of the configuration that produced the rejected summaries.
    pub config_digest: String,
}

/// Serialized JSONL bytes for `pairs`.
pub fn to_jsonl(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let line = PairLine {
            prompt: p.prompt.clone(),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
            document_id: p.document_id.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("pair serializes"));
        out.push('\n');
    }
    out
}

pub fn content_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `pairs` as JSONL and returns the manifest. Degenerate pairs
/// (chosen equal to rejected) never reach the file.
pub fn emit(
    pairs: &[PreferencePair],
    path: &Path,
    config_digest: &str,
) -> Result<DatasetManifest, PreferenceError> {
    let kept: Vec<PreferencePair> = pairs.iter().filter(|p| p.chosen != p.rejected).cloned().collect();
    if kept.is_empty() {
        return Err(PreferenceError::Empty);
    }
    let body = to_jsonl(&kept);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    fs::write(path, &body).map_err(|e| io_err(path, e))?;
    Ok(DatasetManifest {
        pair_count: kept.len(),
        content_digest: content_digest(body.as_bytes()),
        config_digest: config_digest.to_owned(),
    })
}

fn io_err(path: &Path, source: std::io::Error) -> PreferenceError {
    PreferenceError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a pair file back. Pairs read from disk are tagged `Imported` and
/// carry no constraint flags.
pub fn read(path: &Path) -> Result<Vec<PreferencePair>, PreferenceError> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_jsonl(&raw)
}

pub fn parse_jsonl(raw: &str) -> Result<Vec<PreferencePair>, PreferenceError> {
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line: PairLine = serde_json::from_str(l).map_err(|e| PreferenceError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(PreferencePair {
                document_id: line.document_id,
                prompt: line.prompt,
                chosen: line.chosen,
                rejected: line.rejected,
                constraint_flags: None,
                source: PairSource::Imported,
            })
        })
        .collect()
}
