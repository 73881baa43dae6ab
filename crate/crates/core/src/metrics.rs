//! Factuality and overlap metrics: ROUGE-1/2/L, concept-code F1 over a
//! pluggable lexicon, LLM-judge (G-Eval) scoring and Cohen's kappa.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::Corpus;
use crate::gateway::{ChatMessage, ChatRequest, Gateway};
use crate::prompts;
use crate::text::alnum_tokens;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label vectors are empty")]
    EmptyLabels,
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error("lexicon line {line}: {message}")]
    LexiconLine { line: usize, message: String },
    #[error("cannot read lexicon: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f: f64,
}

impl Prf {
    pub fn from_counts(hits: usize, cand_total: usize, ref_total: usize) -> Self {
        let p = if cand_total == 0 { 0.0 } else { hits as f64 / cand_total as f64 };
        let r = if ref_total == 0 { 0.0 } else { hits as f64 / ref_total as f64 };
        Self { p, r, f: f1(p, r) }
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn ngram_prf(cand: &[String], reference: &[String], n: usize) -> Prf {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let hits: usize = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    Prf::from_counts(
        hits,
        cand.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1/2/L over lowercase alphanumeric tokens, no stemming.
pub fn rouge(candidate: &str, reference: &str) -> RougeScore {
    let c = alnum_tokens(candidate);
    let r = alnum_tokens(reference);
    RougeScore {
        r1: ngram_prf(&c, &r, 1),
        r2: ngram_prf(&c, &r, 2),
        rl: Prf::from_counts(lcs_len(&c, &r), c.len(), r.len()),
    }
}

/// Surface form (normalized token sequence) to concept code.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConceptLexicon {
    entries: BTreeMap<String, String>,
    max_phrase_len: usize,
}

const DEMO_LEXICON: &str = include_str!("../data/demo_lexicon.tsv");

impl ConceptLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: &str, code: &str) -> bool {
        let toks = alnum_tokens(surface);
        let code = code.trim();
        if toks.is_empty() || code.is_empty() {
            return false;
        }
        self.max_phrase_len = self.max_phrase_len.max(toks.len());
        self.entries.insert(toks.join(" "), code.to_string());
        true
    }

    /// Parses `surface<TAB>code` lines. Blank lines and `#` comments are skipped.
    pub fn from_tsv(raw: &str) -> Result<Self, MetricError> {
        let mut lex = Self::new();
        for (i, line) in raw.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, code) = line.split_once('\t').ok_or_else(|| MetricError::LexiconLine {
                line: i + 1,
                message: "expected surface<TAB>code".into(),
            })?;
            if !lex.insert(surface, code) {
                return Err(MetricError::LexiconLine {
                    line: i + 1,
                    message: "empty surface form or code".into(),
                });
            }
        }
        if lex.is_empty() {
            return Err(MetricError::EmptyLexicon);
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, MetricError> {
        let raw = std::fs::read_to_string(path).map_err(|e| MetricError::Io(format!("{}: {e}", path.display())))?;
        Self::from_tsv(&raw)
    }

    /// Small bundled lexicon of discharge-summary terms.
    pub fn demo() -> Self {
        Self::from_tsv(DEMO_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_phrase_len(&self) -> usize {
        self.max_phrase_len
    }

    /// Leftmost-longest, non-overlapping matches as (token start, length, code).
    pub fn extract(&self, text: &str) -> Vec<(usize, usize, String)> {
        let toks = alnum_tokens(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let longest = (1..=self.max_phrase_len.min(toks.len() - i))
                .rev()
                .find_map(|n| self.entries.get(&toks[i..i + n].join(" ")).map(|c| (n, c)));
            match longest {
                Some((n, code)) => {
                    out.push((i, n, code.clone()));
                    i += n;
                }
                None => i += 1,
            }
        }
        out
    }

    pub fn codes(&self, text: &str) -> BTreeSet<String> {
        self.extract(text).into_iter().map(|(_, _, c)| c).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptF1 {
    pub p: f64,
    pub r: f64,
    pub f: f64,
    pub matched: BTreeSet<String>,
    /// Set when the reference contains no codes; recall is then reported as 0.
    pub reference_without_codes: bool,
}

pub fn concept_f1(candidate: &str, reference: &str, lexicon: &ConceptLexicon) -> Result<ConceptF1, MetricError> {
    if lexicon.is_empty() {
        return Err(MetricError::EmptyLexicon);
    }
    let c = lexicon.codes(candidate);
    let r = lexicon.codes(reference);
    let matched: BTreeSet<String> = c.intersection(&r).cloned().collect();
    let prf = Prf::from_counts(matched.len(), c.len(), r.len());
    Ok(ConceptF1 {
        p: prf.p,
        r: prf.r,
        f: prf.f,
        matched,
        reference_without_codes: r.is_empty(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GEvalScore {
    pub factual_consistency: u8,
    pub raw_response: String,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GEvalError {
    #[error("no JSON object with a \"Factual Consistency\" key")]
    Parse,
    #[error("factual consistency {0} outside 1..=10")]
    Range(i64),
}

pub const GEVAL_KEY: &str = "Factual Consistency";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GEvalConfig {
    pub model: String,
    pub max_tokens: u32,
}

impl Default for GEvalConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4".into(),
            max_tokens: 256,
        }
    }
}

pub fn render_geval_prompt(article: &str, reference: &str, system_output: &str, config: &GEvalConfig) -> ChatRequest {
    ChatRequest::new(
        config.model.clone(),
        vec![ChatMessage::user(prompts::render_geval(article, reference, system_output))],
    )
    .with_temperature(0.0)
    .with_max_tokens(config.max_tokens)
}

fn coerce_score(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|x| x.is_finite()).map(|x| x.round() as i64)),
        Value::String(s) => s.trim().parse::<f64>().ok().filter(|x| x.is_finite()).map(|x| x.round() as i64),
        _ => None,
    }
}

pub fn parse_geval(raw: &str) -> Result<GEvalScore, GEvalError> {
    for (pos, _) in raw.match_indices('{') {
        let mut it = serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<Value>();
        let Some(Ok(Value::Object(obj))) = it.next() else {
            continue;
        };
        let Some(v) = obj.get(GEVAL_KEY) else {
            continue;
        };
        let score = coerce_score(v).ok_or(GEvalError::Parse)?;
        if !(1..=10).contains(&score) {
            return Err(GEvalError::Range(score));
        }
        return Ok(GEvalScore {
            factual_consistency: score as u8,
            raw_response: raw.to_string(),
        });
    }
    Err(GEvalError::Parse)
}

fn check_labels(a: &[u8], b: &[u8]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::EmptyLabels);
    }
    if let Some(&bad) = a.iter().chain(b).find(|&&x| x > 1) {
        return Err(MetricError::BadLabel(bad));
    }
    Ok(())
}

/// Cohen's kappa for two binary annotators. When chance agreement is 1
/// (both constant and equal) the result is defined as 1.
pub fn cohen_kappa(a: &[u8], b: &[u8]) -> Result<f64, MetricError> {
    check_labels(a, b)?;
    let n = a.len() as f64;
    let po = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let pa1 = a.iter().filter(|&&x| x == 1).count() as f64 / n;
    let pb1 = b.iter().filter(|&&x| x == 1).count() as f64 / n;
    let pe = pa1 * pb1 + (1.0 - pa1) * (1.0 - pb1);
    if (1.0 - pe).abs() < f64::EPSILON {
        return Ok(1.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgreementResult {
    pub per_document_kappa: BTreeMap<String, f64>,
    pub mean_kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub excluded: BTreeMap<String, String>,
}

impl AgreementResult {
    pub fn from_kappas(per_document_kappa: BTreeMap<String, f64>, excluded: BTreeMap<String, String>) -> Self {
        let mean_kappa = if per_document_kappa.is_empty() {
            None
        } else {
            Some(per_document_kappa.values().sum::<f64>() / per_document_kappa.len() as f64)
        };
        Self {
            per_document_kappa,
            mean_kappa,
            excluded,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no outputs to evaluate")]
    EmptyOutputs,
    #[error("document {0} not in corpus")]
    UnknownDocument(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentScores {
    pub document_id: String,
    pub rouge: RougeScore,
    pub concept: ConceptF1,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geval: Option<u8>,
}

/// One Table-2-shaped row: ROUGE and concept F1 scaled by 100, G-Eval raw mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R2")]
    pub r2: f64,
    #[serde(rename = "RL")]
    pub rl: f64,
    #[serde(rename = "G-Eval")]
    pub g_eval: Option<f64>,
    #[serde(rename = "UMLS-F1")]
    pub umls_f1: f64,
}

impl ReportRow {
    pub fn table_line(&self, label: &str) -> String {
        let g = self.g_eval.map_or("-".to_string(), |g| format!("{g:.3}"));
        format!("{label} {:.2} {:.2} {:.2} {g} {:.2}", self.r1, self.r2, self.rl, self.umls_f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: ReportRow,
    pub documents: Vec<DocumentScores>,
    pub failures: BTreeMap<String, String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores system outputs against corpus references. G-Eval runs only when a
/// gateway is supplied; its per-document failures are recorded, not fatal.
pub async fn evaluate_run(
    outputs: &[(String, String)],
    corpus: &Corpus,
    lexicon: &ConceptLexicon,
    geval: Option<(&Gateway, &GEvalConfig)>,
) -> Result<EvalReport, EvalError> {
    if outputs.is_empty() {
        return Err(EvalError::EmptyOutputs);
    }
    let mut documents = Vec::with_capacity(outputs.len());
    let mut failures = BTreeMap::new();
    for (id, summary) in outputs {
        let doc = corpus.get(id).ok_or_else(|| EvalError::UnknownDocument(id.clone()))?;
        let concept = concept_f1(summary, &doc.reference_summary, lexicon)?;
        if concept.reference_without_codes {
            failures.insert(id.clone(), "reference contains no lexicon concepts".to_string());
        }
        let geval_score = match geval {
            Some((gw, cfg)) => {
                let req = render_geval_prompt(&doc.article, &doc.reference_summary, summary, cfg);
                match gw.complete(&req).await {
                    Ok(resp) => match parse_geval(&resp.content) {
                        Ok(s) => Some(s.factual_consistency),
                        Err(e) => {
                            failures.insert(id.clone(), format!("g-eval: {e}"));
                            None
                        }
                    },
                    Err(e) => {
                        failures.insert(id.clone(), format!("g-eval: {e}"));
                        None
                    }
                }
            }
            None => None,
        };
        documents.push(DocumentScores {
            document_id: id.clone(),
            rouge: rouge(summary, &doc.reference_summary),
            concept,
            geval: geval_score,
        });
    }
    let gevals: Vec<f64> = documents.iter().filter_map(|d| d.geval.map(f64::from)).collect();
    let summary = ReportRow {
        r1: 100.0 * mean(documents.iter().map(|d| d.rouge.r1.f)),
        r2: 100.0 * mean(documents.iter().map(|d| d.rouge.r2.f)),
        rl: 100.0 * mean(documents.iter().map(|d| d.rouge.rl.f)),
        g_eval: (!gevals.is_empty()).then(|| mean(gevals.iter().copied())),
        umls_f1: 100.0 * mean(documents.iter().map(|d| d.concept.f)),
    };
    Ok(EvalReport {
        summary,
        documents,
        failures,
    })
}
