//! Hallucination-edit synthesis: prompt rendering, LLM call, response
//! parsing and constraint validation.

use std::sync::OnceLock;

use futures::stream::{self, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayError};
use crate::prompts;
use crate::text::word_count;

/// Maximum number of extra words the hallucinated summary may carry.
pub const MAX_EXTRA_WORDS: i64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EditOp {
    Add,
    Omit,
}

impl EditOp {
    pub fn as_str(self) -> &'static str {
        match self {
            EditOp::Add => "ADD",
            EditOp::Omit => "OMIT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditInstruction {
    pub index: usize,
    pub op: EditOp,
    pub span: String,
    #[serde(default, skip_serializing)]
    pub raw_line: String,
}

impl EditInstruction {
    pub fn new(index: usize, op: EditOp, span: impl Into<String>) -> Self {
        Self {
            index,
            op,
            span: span.into(),
            raw_line: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub extra_words: i64,
    pub add_count: usize,
    pub omit_count: usize,
    pub length_ok: bool,
    pub balanced_ok: bool,
}

impl ConstraintReport {
    pub fn is_clean(&self) -> bool {
        self.length_ok && self.balanced_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub document_id: String,
    pub instructions: Vec<EditInstruction>,
    pub hallucinated_summary: String,
    pub validation: ConstraintReport,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("response is empty")]
    EmptyInput,
    #[error("no \"Hallucinated Summary:\" marker in response")]
    NoSummaryMarker,
    #[error("hallucinated summary after the marker is empty")]
    EmptySummary,
    #[error("no parsable Add/Omit instruction lines")]
    NoInstructions,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub instructions: Vec<EditInstruction>,
    pub hallucinated_summary: String,
    pub warnings: Vec<String>,
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)Hallucinated Summary\s*:").unwrap())
}

fn instruction_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:(\d+)\s*[.)]\s*)?(add|omit)(?:\s+operation)?\s*:\s*(.*?)\s*$").unwrap()
    })
}

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\s*[.)]\s*(\S.*)$").unwrap())
}

fn braced_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([^{}]*)\}").unwrap())
}

/// Strips one layer of surrounding double quotes. A stray quote mark after
/// the closing quote (`"..."'`) is tolerated.
fn unquote(span: &str) -> &str {
    let s = span.trim();
    let open = |c: char| c == '"' || c == '\u{201c}';
    let close = |c: char| c == '"' || c == '\u{201d}';
    let mut chars = s.chars();
    let (Some(first), Some(last)) = (chars.next(), s.chars().last()) else {
        return s;
    };
    if s.chars().count() >= 2 && open(first) && close(last) {
        return s[first.len_utf8()..s.len() - last.len_utf8()].trim();
    }
    if open(first) {
        let trimmed = s.trim_end_matches(['\'', '\u{2019}']);
        if trimmed.len() < s.len() {
            if let Some(l) = trimmed.chars().last() {
                if close(l) && trimmed.chars().count() >= 2 {
                    return trimmed[first.len_utf8()..trimmed.len() - l.len_utf8()].trim();
                }
            }
        }
    }
    s
}

fn parse_item(text: &str, position: usize, raw_line: &str) -> Option<EditInstruction> {
    let caps = instruction_re().captures(text)?;
    let op = if caps[2].eq_ignore_ascii_case("add") {
        EditOp::Add
    } else {
        EditOp::Omit
    };
    let span = unquote(&caps[3]);
    if span.is_empty() {
        return None;
    }
    let index = caps
        .get(1)
        .and_then(|m| m.as_str().parse().ok())
        .unwrap_or(position);
    Some(EditInstruction {
        index,
        op,
        span: span.to_owned(),
        raw_line: raw_line.to_owned(),
    })
}

/// Splits an LLM response into edit instructions and the hallucinated
/// summary. Never panics; every failure is a [`ParseError`].
pub fn parse_response(raw: &str) -> Result<ParsedResponse, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::EmptyInput);
    }
    let marker = marker_re()
        .find_iter(raw)
        .last()
        .ok_or(ParseError::NoSummaryMarker)?;
    let summary = raw[marker.end()..].trim();
    let head = &raw[..marker.start()];

    let mut instructions = Vec::new();
    let mut warnings = Vec::new();
    for line in head.lines() {
        let braced: Vec<&str> = braced_re()
            .captures_iter(line)
            .map(|c| c.get(1).unwrap().as_str())
            .collect();
        if !braced.is_empty() && braced.iter().any(|b| instruction_re().is_match(b)) {
            for item in braced {
                match parse_item(item, instructions.len() + 1, line) {
                    Some(ins) => instructions.push(ins),
                    None => warnings.push(format!("skipped braced edit {item:?}")),
                }
            }
            continue;
        }
        if let Some(ins) = parse_item(line, instructions.len() + 1, line) {
            instructions.push(ins);
        } else if numbered_re().is_match(line) {
            warnings.push(format!("skipped numbered line without Add/Omit: {:?}", line.trim()));
        }
    }
    if instructions.is_empty() {
        return Err(ParseError::NoInstructions);
    }
    if summary.is_empty() {
        return Err(ParseError::EmptySummary);
    }
    Ok(ParsedResponse {
        instructions,
        hallucinated_summary: summary.to_owned(),
        warnings,
    })
}

/// Renders instructions and a summary in the response format the parser
/// accepts.
pub fn format_response(instructions: &[EditInstruction], summary: &str) -> String {
    let mut out = String::from("Numbered List hallucination edits made:\n");
    for ins in instructions {
        let keyword = match ins.op {
            EditOp::Add => "Add",
            EditOp::Omit => "Omit",
        };
        out.push_str(&format!("{}. {keyword} Operation: \"{}\"\n", ins.index, ins.span));
    }
    out.push_str("Hallucinated Summary:\n");
    out.push_str(summary);
    out
}

pub fn validate_constraints(
    reference: &str,
    instructions: &[EditInstruction],
    hallucinated: &str,
) -> ConstraintReport {
    let extra_words = word_count(hallucinated) as i64 - word_count(reference) as i64;
    let add_count = instructions.iter().filter(|i| i.op == EditOp::Add).count();
    let omit_count = instructions.len() - add_count;
    ConstraintReport {
        extra_words,
        add_count,
        omit_count,
        length_ok: extra_words <= MAX_EXTRA_WORDS,
        balanced_ok: add_count == omit_count,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Extra attempts after a parse failure, reusing the same prompt.
    pub max_reprompts: u32,
    /// Reject results whose constraint report is not clean.
    pub strict: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo".into(),
            temperature: 1.0,
            max_tokens: 1024,
            max_reprompts: 2,
            strict: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("document {document_id}: gateway error: {source}")]
    Gateway {
        document_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("document {document_id}: unparsable after {attempts} attempts: {last_error}")]
    Exhausted {
        document_id: String,
        attempts: u32,
        last_error: ParseError,
        last_raw: String,
    },
    #[error("document {document_id}: constraints violated ({report:?})")]
    ConstraintViolation {
        document_id: String,
        report: ConstraintReport,
        raw_response: String,
    },
}

pub fn render_edit_prompt(doc: &Document, config: &SynthesisConfig) -> ChatRequest {
    ChatRequest::new(
        config.model.clone(),
        vec![ChatMessage::user(prompts::render_edit(
            &doc.article,
            &doc.reference_summary,
        ))],
    )
    .with_temperature(config.temperature)
    .with_max_tokens(config.max_tokens)
}

/// Render, complete, parse (re-prompting on parse failure) and validate.
pub async fn synthesize(
    doc: &Document,
    gateway: &Gateway,
    config: &SynthesisConfig,
) -> Result<SynthesisResult, SynthesisError> {
    let req = render_edit_prompt(doc, config);
    let attempts = config.max_reprompts + 1;
    let mut last = None;
    for attempt in 1..=attempts {
        let resp = gateway
            .complete(&req)
            .await
            .map_err(|source| SynthesisError::Gateway {
                document_id: doc.id.clone(),
                source,
            })?;
        match parse_response(&resp.content) {
            Ok(parsed) => {
                let validation = validate_constraints(
                    &doc.reference_summary,
                    &parsed.instructions,
                    &parsed.hallucinated_summary,
                );
                if config.strict && !validation.is_clean() {
                    return Err(SynthesisError::ConstraintViolation {
                        document_id: doc.id.clone(),
                        report: validation,
                        raw_response: resp.content,
                    });
                }
                return Ok(SynthesisResult {
                    document_id: doc.id.clone(),
                    instructions: parsed.instructions,
                    hallucinated_summary: parsed.hallucinated_summary,
                    validation,
                    raw_response: resp.content,
                    warnings: parsed.warnings,
                });
            }
            Err(e) => {
                tracing::warn!(document = %doc.id, attempt, error = %e, "unparsable edit response");
                last = Some((e, resp.content));
            }
        }
    }
    let (last_error, last_raw) = last.expect("at least one attempt");
    Err(SynthesisError::Exhausted {
        document_id: doc.id.clone(),
        attempts,
        last_error,
        last_raw,
    })
}

/// Synthesizes many documents with at most `parallelism` LLM calls in flight.
pub async fn synthesize_all(
    docs: &[Document],
    gateway: &Gateway,
    config: &SynthesisConfig,
    parallelism: usize,
) -> Vec<Result<SynthesisResult, SynthesisError>> {
    stream::iter(docs)
        .map(|d| synthesize(d, gateway, config))
        .buffered(parallelism.max(1))
        .collect()
        .await
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_quoted_add_operation() {
        let raw = "Numbered List hallucination edits made:\n1. Add Operation: \"Please call your doctor if you experience any of the following:\"\nHallucinated Summary:\nX";
        let p = parse_response(raw).unwrap();
        assert_eq!(p.instructions.len(), 1);
        let ins = &p.instructions[0];
        assert_eq!(ins.index, 1);
        assert_eq!(ins.op, EditOp::Add);
        assert_eq!(ins.span, "Please call your doctor if you experience any of the following:");
    }

    #[test]
    fn parses_unquoted_omit() {
        let raw = "2. Omit: Please shower daily including washing incisions gently with mild soap, no baths or swimming until cleared by surgeon.\nHallucinated Summary: Y";
        let p = parse_response(raw).unwrap();
        let ins = &p.instructions[0];
        assert_eq!((ins.index, ins.op), (2, EditOp::Omit));
        assert!(ins.span.starts_with("Please shower daily"));
        assert!(ins.span.ends_with("surgeon."));
        assert_eq!(p.hallucinated_summary, "Y");
    }

    #[test]
    fn stray_trailing_quote_is_tolerated() {
        assert_eq!(unquote("\"Also, do not chew gum.\"'"), "Also, do not chew gum.");
        assert_eq!(unquote("\"quoted\""), "quoted");
        assert_eq!(unquote("plain 'x'"), "plain 'x'");
        assert_eq!(unquote("\""), "\"");
    }

    #[test]
    fn empty_instruction_section_is_error() {
        let raw = "Numbered List hallucination edits made:\n\nHallucinated Summary:\nSomething.";
        assert_eq!(parse_response(raw), Err(ParseError::NoInstructions));
    }

    #[test]
    fn missing_marker_is_error() {
        assert_eq!(
            parse_response("1. Add: x\n2. Omit: y"),
            Err(ParseError::NoSummaryMarker)
        );
        assert_eq!(parse_response("   "), Err(ParseError::EmptyInput));
        assert_eq!(
            parse_response("1. Add: x\nHallucinated Summary:   \n"),
            Err(ParseError::EmptySummary)
        );
    }

    #[test]
    fn unknown_keyword_is_warning() {
        let raw = "1. Add: a\n2. Replace: b\n3. Omit: c\nhallucinated summary : S";
        let p = parse_response(raw).unwrap();
        assert_eq!(p.instructions.len(), 2);
        assert_eq!(p.instructions[1].index, 3);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn last_marker_wins_and_misspelling_accepted() {
        let raw = "Numbererd List hallucination edits made:\n1) add operation: a\nHallucinated Summary: draft\n2. OMIT: b\nHallucinated Summary:\nfinal";
        let p = parse_response(raw).unwrap();
        assert_eq!(p.hallucinated_summary, "final");
        assert_eq!(p.instructions.len(), 2);
        assert_eq!(p.instructions[0].op, EditOp::Add);
    }

    #[test]
    fn braced_alternate_form() {
        let raw = "Numbererd List hallucination edits made:\n{Add: first thing}, {Omit: \"second thing\"}\nHallucinated Summary:\nS";
        let p = parse_response(raw).unwrap();
        assert_eq!(p.instructions.len(), 2);
        assert_eq!(p.instructions[0].index, 1);
        assert_eq!(p.instructions[1].index, 2);
        assert_eq!(p.instructions[1].span, "second thing");
    }

    fn ins(op: EditOp, index: usize) -> EditInstruction {
        EditInstruction {
            index,
            op,
            span: "x".into(),
            raw_line: String::new(),
        }
    }

    #[test]
    fn constraint_identity() {
        let r = validate_constraints("a b c", &[ins(EditOp::Add, 1), ins(EditOp::Omit, 2)], "a b c");
        assert_eq!(r.extra_words, 0);
        assert!(r.length_ok && r.balanced_ok);
    }

    #[test]
    fn constraint_length_boundary() {
        let five = validate_constraints("a", &[], "a 1 2 3 4 5");
        assert_eq!(five.extra_words, 5);
        assert!(five.length_ok);
        let six = validate_constraints("a", &[], "a 1 2 3 4 5 6");
        assert!(!six.length_ok);
    }

    #[test]
    fn constraint_balance() {
        let mut list: Vec<_> = (1..=3).map(|i| ins(EditOp::Add, i)).collect();
        list.extend((4..=8).map(|i| ins(EditOp::Omit, i)));
        let r = validate_constraints("a", &list, "a");
        assert_eq!((r.add_count, r.omit_count), (3, 5));
        assert!(!r.balanced_ok);
    }

    fn span_strategy() -> impl Strategy<Value = String> {
        "[A-Za-z0-9][A-Za-z0-9 ,.;:'()\\-\\[\\]*]{0,40}[A-Za-z0-9.]"
            .prop_filter("no marker", |s| !marker_re().is_match(s))
    }

    proptest! {
        #[test]
        fn format_parse_round_trip(items in prop::collection::vec((any::<bool>(), span_strategy()), 1..10)) {
            let list: Vec<EditInstruction> = items
                .iter()
                .enumerate()
                .map(|(i, (add, span))| EditInstruction {
                    index: i + 1,
                    op: if *add { EditOp::Add } else { EditOp::Omit },
                    span: span.clone(),
                    raw_line: String::new(),
                })
                .collect();
            let parsed = parse_response(&format_response(&list, "Summary text.")).unwrap();
            let got: Vec<_> = parsed.instructions.iter().map(|i| (i.index, i.op, i.span.clone())).collect();
            let want: Vec<_> = list.iter().map(|i| (i.index, i.op, i.span.clone())).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(parsed.hallucinated_summary, "Summary text.");
        }

        #[test]
        fn parser_is_total(raw in "\\PC*") {
            let _ = parse_response(&raw);
        }

        #[test]
        fn parser_is_total_on_structured_noise(
            lines in prop::collection::vec(
                prop_oneof![
                    Just("Hallucinated Summary:".to_string()),
                    Just("1. Add:".to_string()),
                    Just("{Omit: }".to_string()),
                    Just("\"".to_string()),
                    "[0-9]{1,3}[.)] ?(Add|Omit|Foo)? ?(Operation)?:? ?\\PC{0,12}",
                ],
                0..12,
            )
        ) {
            let _ = parse_response(&lines.join("\n"));
        }
    }
}
