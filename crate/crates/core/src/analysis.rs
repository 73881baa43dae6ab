//! Sentence-level diff of reference vs. hallucinated summaries, edit-type
//! classification and corpus-level edit statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::synthesis::{EditInstruction, EditOp, SynthesisResult};
use crate::text::alnum_tokens;

pub const DEFAULT_THRESHOLD: f64 = 0.6;

/// Tolerance on distribution sums.
pub const SUM_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EditType {
    #[serde(rename = "AR-MI")]
    ArMi,
    #[serde(rename = "AR-NMI")]
    ArNmi,
    #[serde(rename = "AA-MI")]
    AaMi,
    /// Not one of the six tabulated codes; emitted when it occurs.
    #[serde(rename = "AA-NMI")]
    AaNmi,
    #[serde(rename = "OR-MI")]
    OrMi,
    #[serde(rename = "OR-NMI")]
    OrNmi,
    #[serde(rename = "OA-MI")]
    OaMi,
}

impl EditType {
    pub const TABLE: [EditType; 6] = [
        EditType::ArMi,
        EditType::ArNmi,
        EditType::AaMi,
        EditType::OrMi,
        EditType::OrNmi,
        EditType::OaMi,
    ];

    pub fn code(self) -> &'static str {
        match self {
            EditType::ArMi => "AR-MI",
            EditType::ArNmi => "AR-NMI",
            EditType::AaMi => "AA-MI",
            EditType::AaNmi => "AA-NMI",
            EditType::OrMi => "OR-MI",
            EditType::OrNmi => "OR-NMI",
            EditType::OaMi => "OA-MI",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        [Self::AaNmi].iter().chain(Self::TABLE.iter()).copied().find(|t| t.code() == code)
    }

    pub fn in_table(self) -> bool {
        self != EditType::AaNmi
    }

    pub fn op(self) -> EditOp {
        match self {
            EditType::ArMi | EditType::ArNmi | EditType::AaMi | EditType::AaNmi => EditOp::Add,
            _ => EditOp::Omit,
        }
    }

    pub fn mentioned(self) -> bool {
        matches!(self, EditType::ArMi | EditType::AaMi | EditType::OrMi | EditType::OaMi)
    }

    fn compose(op: EditOp, from_article: bool, mentioned: bool) -> Self {
        match (op, from_article, mentioned) {
            (EditOp::Add, false, true) => EditType::ArMi,
            (EditOp::Add, false, false) => EditType::ArNmi,
            (EditOp::Add, true, true) => EditType::AaMi,
            (EditOp::Add, true, false) => EditType::AaNmi,
            (EditOp::Omit, true, _) => EditType::OaMi,
            (EditOp::Omit, false, true) => EditType::OrMi,
            (EditOp::Omit, false, false) => EditType::OrNmi,
        }
    }
}

impl std::fmt::Display for EditType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AnalysisError {
    #[error("hallucinated summary for {0} is empty")]
    EmptySummary(String),
    #[error("threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("no edit events to aggregate")]
    NoEvents,
}

/// Byte range of one sentence inside the segmented text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
}

impl SentenceSpan {
    pub fn text<'a>(&self, source: &'a str) -> &'a str {
        &source[self.start..self.end]
    }
}

const ABBREVIATIONS: &[&str] = &["dr", "mr", "mrs", "ms", "st", "vs", "jr", "sr", "prof", "e.g", "i.e"];

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

/// Splits `text` into sentences ending at `.`, `!` or `?` followed by
/// whitespace. Terminators inside `[** ... **]` tokens, after title
/// abbreviations, or after a single letter followed by a lowercase word do
/// not end a sentence. A leading section heading such as
/// `Discharge Instructions:` is its own span. Spans exclude the whitespace
/// between sentences.
pub fn segment(text: &str) -> Vec<SentenceSpan> {
    static HEADING: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"^\s*[A-Z][A-Za-z]*(?: [A-Z][A-Za-z]*){0,3}:\s").expect("valid regex"));
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut deid_depth = 0usize;
    let mut i = 0;
    if let Some(m) = HEADING.find(text) {
        let colon = text[..m.end()].rfind(':').expect("heading ends in colon");
        let first = m.start() + (text[m.start()..].len() - text[m.start()..].trim_start().len());
        spans.push(SentenceSpan { start: first, end: colon + 1 });
        i = chars.partition_point(|(p, _)| *p <= colon);
    }
    while i < chars.len() {
        let (pos, c) = chars[i];
        if start.is_none() {
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            start = Some(pos);
        }
        if text[pos..].starts_with("[**") {
            deid_depth += 1;
            i += 3;
            continue;
        }
        if deid_depth > 0 && text[pos..].starts_with("**]") {
            deid_depth -= 1;
            i += 3;
            continue;
        }
        if deid_depth == 0 && is_terminator(c) {
            let mut j = i + 1;
            while j < chars.len() && (is_terminator(chars[j].1) || is_closer(chars[j].1)) {
                j += 1;
            }
            let at_end = j == chars.len();
            if at_end || chars[j].1.is_whitespace() {
                let end = if at_end { text.len() } else { chars[j].0 };
                let s = start.expect("sentence started");
                if !guarded(text, s, pos, &chars, j) {
                    spans.push(SentenceSpan { start: s, end });
                    start = None;
                }
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        let end = s + text[s..].trim_end().len();
        if end > s {
            spans.push(SentenceSpan { start: s, end });
        }
    }
    spans
}

fn guarded(text: &str, sentence_start: usize, term_pos: usize, chars: &[(usize, char)], after: usize) -> bool {
    let before = &text[sentence_start..term_pos];
    let word = before
        .rsplit(|c: char| c.is_whitespace() || c == '(' || c == '[')
        .next()
        .unwrap_or("");
    let lower = word.to_lowercase();
    if ABBREVIATIONS.contains(&lower.as_str()) {
        return true;
    }
    let next = chars[after..].iter().map(|(_, c)| *c).find(|c| !c.is_whitespace());
    let single_letter = word.chars().count() == 1 && word.chars().all(char::is_alphabetic);
    single_letter && next.is_some_and(char::is_lowercase)
}

pub fn sentences(text: &str) -> Vec<&str> {
    segment(text).iter().map(|s| s.text(text)).collect()
}

fn token_set(text: &str) -> BTreeSet<String> {
    alnum_tokens(text).into_iter().collect()
}

/// Jaccard index of lowercased alphanumeric token sets; 1.0 when both are empty.
pub fn similarity(a: &str, b: &str) -> f64 {
    jaccard(&token_set(a), &token_set(b))
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

fn best_match(s: &BTreeSet<String>, pool: &[BTreeSet<String>]) -> f64 {
    pool.iter().map(|p| jaccard(s, p)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEvent {
    pub document_id: String,
    pub edit_type: EditType,
    pub span: String,
    pub matched_instruction: Option<usize>,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnrealizedReason {
    /// No realized edit resembles the instruction span.
    NoMatchingEdit,
    /// An ADD instruction whose span was already in the reference and was kept.
    RetainedFromReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnrealizedInstruction {
    pub document_id: String,
    pub index: usize,
    pub op: EditOp,
    pub reason: UnrealizedReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub events: Vec<EditEvent>,
    pub unrealized: Vec<UnrealizedInstruction>,
}

struct Indexed {
    sets: Vec<BTreeSet<String>>,
}

impl Indexed {
    fn new(sents: &[&str]) -> Self {
        Self {
            sets: sents.iter().map(|s| token_set(s)).collect(),
        }
    }
}

/// Best instruction of `op` for `span`: highest similarity, then lowest index.
fn match_instruction(
    span: &BTreeSet<String>,
    instructions: &[(&EditInstruction, BTreeSet<String>)],
    op: EditOp,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (ins, set) in instructions.iter().filter(|(i, _)| i.op == op) {
        let sim = jaccard(span, set);
        best = match best {
            None => Some((ins.index, sim)),
            Some((idx, s)) if sim > s || (sim == s && ins.index < idx) => Some((ins.index, sim)),
            keep => keep,
        };
    }
    best
}

/// Classifies every realized difference between the reference and the
/// hallucinated summary.
///
/// Additions are hallucinated sentences with no reference sentence at or
/// above `threshold`; omissions are reference sentences with no counterpart
/// in the hallucinated summary. An addition is article-sourced (AA) when it
/// matches an article sentence, otherwise AR. An omission is OA when its
/// OMIT instruction's span matches the article better than the reference.
/// An edit is MI when an instruction of the same op reaches `threshold`.
pub fn classify_edits(
    doc: &Document,
    result: &SynthesisResult,
    threshold: f64,
) -> Result<Classification, AnalysisError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(AnalysisError::BadThreshold(threshold));
    }
    if result.hallucinated_summary.trim().is_empty() {
        return Err(AnalysisError::EmptySummary(doc.id.clone()));
    }
    let ref_sents = sentences(&doc.reference_summary);
    let hal_sents = sentences(&result.hallucinated_summary);
    let art_sents = sentences(&doc.article);
    let refs = Indexed::new(&ref_sents);
    let hals = Indexed::new(&hal_sents);
    let arts = Indexed::new(&art_sents);
    let instructions: Vec<(&EditInstruction, BTreeSet<String>)> = result
        .instructions
        .iter()
        .map(|i| (i, token_set(&i.span)))
        .collect();

    let mut events = Vec::new();
    let mut used: BTreeSet<usize> = BTreeSet::new();
    let mut emit = |op: EditOp, text: &str, set: &BTreeSet<String>, from_article: bool, events: &mut Vec<EditEvent>| {
        let matched = match_instruction(set, &instructions, op);
        let (mi, sim) = match matched {
            Some((idx, sim)) if sim >= threshold => (Some(idx), sim),
            Some((_, sim)) => (None, sim),
            None => (None, 0.0),
        };
        let from_article = from_article
            || (op == EditOp::Omit
                && mi.is_some_and(|idx| {
                    let (_, span) = instructions.iter().find(|(i, _)| i.index == idx && i.op == op).unwrap();
                    let art = best_match(span, &arts.sets);
                    art >= threshold && art > best_match(span, &refs.sets)
                }));
        if let Some(idx) = mi {
            used.insert(idx);
        }
        events.push(EditEvent {
            document_id: doc.id.clone(),
            edit_type: EditType::compose(op, from_article, mi.is_some()),
            span: text.to_owned(),
            matched_instruction: mi,
            similarity: sim,
        });
    };

    for (text, set) in hal_sents.iter().zip(&hals.sets) {
        if best_match(set, &refs.sets) < threshold {
            let from_article = best_match(set, &arts.sets) >= threshold;
            emit(EditOp::Add, text, set, from_article, &mut events);
        }
    }
    for (text, set) in ref_sents.iter().zip(&refs.sets) {
        if best_match(set, &hals.sets) < threshold {
            emit(EditOp::Omit, text, set, false, &mut events);
        }
    }

    let mut unrealized = Vec::new();
    for (ins, set) in &instructions {
        if used.contains(&ins.index) {
            continue;
        }
        let art = best_match(set, &arts.sets);
        let refm = best_match(set, &refs.sets);
        let hal = best_match(set, &hals.sets);
        if ins.op == EditOp::Omit && art >= threshold && art > refm && hal < threshold {
            // article content the instruction told the model to leave out
            events.push(EditEvent {
                document_id: doc.id.clone(),
                edit_type: EditType::OaMi,
                span: ins.span.clone(),
                matched_instruction: Some(ins.index),
                similarity: art,
            });
            continue;
        }
        let reason = if ins.op == EditOp::Add && refm >= threshold && hal >= threshold {
            UnrealizedReason::RetainedFromReference
        } else {
            UnrealizedReason::NoMatchingEdit
        };
        unrealized.push(UnrealizedInstruction {
            document_id: doc.id.clone(),
            index: ins.index,
            op: ins.op,
            reason,
        });
    }
    Ok(Classification { events, unrealized })
}

/// Hallucination labels keyed by (document id, instruction index); each
/// annotator judgment is one entry in the vector.
pub type HallucinationLabels = BTreeMap<(String, usize), Vec<u8>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpShare {
    pub add_halluc: f64,
    pub omit_halluc: f64,
    pub add_non: f64,
    pub omit_non: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditStats {
    pub event_count: usize,
    pub type_distribution: BTreeMap<EditType, f64>,
    /// Type distribution over labeled judgments with label 0.
    pub hallucinating_by_type: Option<BTreeMap<EditType, f64>>,
    /// Op × label cross-tab over labeled judgments.
    pub op_hallucination_share: Option<OpShare>,
}

fn distribution(counts: &BTreeMap<EditType, usize>) -> BTreeMap<EditType, f64> {
    let total: usize = counts.values().sum();
    let mut out: BTreeMap<EditType, f64> = EditType::TABLE.iter().map(|t| (*t, 0.0)).collect();
    for (t, c) in counts {
        out.insert(*t, if total == 0 { 0.0 } else { *c as f64 / total as f64 });
    }
    out
}

/// Aggregates events into the type distribution and, when labels are
/// supplied, the hallucination cross-tabs over MI events.
pub fn aggregate_stats(
    events: &[EditEvent],
    labels: Option<&HallucinationLabels>,
) -> Result<EditStats, AnalysisError> {
    if events.is_empty() {
        return Err(AnalysisError::NoEvents);
    }
    let mut counts: BTreeMap<EditType, usize> = BTreeMap::new();
    for e in events {
        *counts.entry(e.edit_type).or_default() += 1;
    }

    let (hallucinating_by_type, op_hallucination_share) = match labels {
        None => (None, None),
        Some(labels) => {
            let mut halluc: BTreeMap<EditType, usize> = BTreeMap::new();
            let mut cross = [[0usize; 2]; 2]; // [op][label]
            for e in events {
                let Some(idx) = e.matched_instruction else { continue };
                let Some(ls) = labels.get(&(e.document_id.clone(), idx)) else { continue };
                for &l in ls {
                    let op = usize::from(e.edit_type.op() == EditOp::Omit);
                    cross[op][usize::from(l != 0)] += 1;
                    if l == 0 {
                        *halluc.entry(e.edit_type).or_default() += 1;
                    }
                }
            }
            let total: usize = cross.iter().flatten().sum();
            if total == 0 {
                (None, None)
            } else {
                let f = |c: usize| c as f64 / total as f64;
                let share = OpShare {
                    add_halluc: f(cross[0][0]),
                    omit_halluc: f(cross[1][0]),
                    add_non: f(cross[0][1]),
                    omit_non: f(cross[1][1]),
                };
                let by_type = if halluc.is_empty() { None } else { Some(distribution(&halluc)) };
                (by_type, Some(share))
            }
        }
    };
    Ok(EditStats {
        event_count: events.len(),
        type_distribution: distribution(&counts),
        hallucinating_by_type,
        op_hallucination_share,
    })
}
