//! Offline demo material: the two hand-annotated worked examples, a
//! seeded synthetic discharge corpus and a scripted chat transport that
//! answers edit and judge prompts without a network.

use std::collections::BTreeMap;
use std::sync::Arc;

use async_trait::async_trait;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::analysis::sentences;
use crate::corpus::{Corpus, Document};
use crate::gateway::{ChatRequest, ChatResponse, Transport, TransportError, Usage};
use crate::metrics::rouge;
use crate::prompts;
use crate::gateway::{Gateway, RetryPolicy};
use crate::preference::{assemble, FlagPolicy, PreferencePair};
use crate::synthesis::{format_response, synthesize_all, EditInstruction, EditOp, SynthesisConfig, SynthesisResult};

const ANNOTATED: &str = include_str!("../data/annotated_examples.json");

/// Endpoint string that selects [`ScriptedTransport`] instead of HTTP.
pub const SCRIPTED_ENDPOINT: &str = "scripted://demo";

#[derive(Debug, Clone, Deserialize)]
pub struct Judgment {
    pub instruction_index: usize,
    pub hallucination_label: u8,
    pub comment: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ExpectedInstruction {
    pub op: EditOp,
    pub span: String,
}

/// A document with the LLM response it received and two annotators' labels.
#[derive(Debug, Clone, Deserialize)]
pub struct AnnotatedExample {
    pub id: String,
    pub article: String,
    pub reference_summary: String,
    pub raw_response: String,
    pub hallucinated_summary: String,
    pub instructions: Vec<ExpectedInstruction>,
    pub annotators: BTreeMap<String, Vec<Judgment>>,
}

impl AnnotatedExample {
    pub fn document(&self) -> Document {
        Document::new(&self.id, &self.article, &self.reference_summary)
    }

    pub fn labels(&self, annotator: &str) -> Vec<u8> {
        self.annotators[annotator].iter().map(|j| j.hallucination_label).collect()
    }
}

pub fn annotated_examples() -> Vec<AnnotatedExample> {
    serde_json::from_str(ANNOTATED).expect("bundled examples are valid")
}

pub fn annotated_corpus() -> Corpus {
    Corpus::from_documents(annotated_examples().iter().map(AnnotatedExample::document).collect())
        .expect("bundled examples have unique ids")
}

const COURSE: &[&str] = &[
    "Pt was admitted with {a} and started on {m}.",
    "Pt presented with {s} and was monitored on telemetry.",
    "An EGD was performed on HD#{d} and showed a small ulcer without active bleeding.",
    "Blood pressure remained stable after the beta blocker was held for hypotension.",
    "The patient received {d} units of PRBCs with an appropriate rise in hematocrit.",
    "Chest tubes were removed on POD #{d} without complication.",
    "Physical therapy evaluated the patient for strength and mobility.",
    "The patient was anticoagulated with Coumadin for chronic atrial fibrillation.",
    "Antibiotics were continued for a total of {d} days for pneumonia.",
    "Insulin was adjusted for elevated blood sugar in the setting of diabetes.",
    "Lasix was given for heart failure with improvement in leg swelling.",
    "Pain was controlled with Tylenol only due to somnolence with Ultram.",
    "The wound was healing well with no sign of infection.",
    "The patient tolerated a Stage III diet by HD#{d}.",
    "Target INR was set at 2.0-2.5 with a check the day after discharge.",
    "Metoprolol was restarted at a low dose once blood pressure allowed.",
];

const INSTRUCTIONS: &[&str] = &[
    "Please call your doctor if you experience fever, chest pain or shortness of breath.",
    "Please take your medications as prescribed.",
    "Please take {m} every day and do not skip doses.",
    "Have your INR checked {d} days after discharge.",
    "Look at your incisions daily for redness or drainage.",
    "No driving while taking narcotics.",
    "No lifting more than {d} pounds for {d} weeks.",
    "Weigh yourself every morning and call if you gain more than {d} pounds.",
    "Check your blood sugar before each meal.",
    "Please remain on your current diet until you follow up with your doctor.",
    "Take a multivitamin daily.",
    "Call if you notice blood in your stool or vomit.",
    "Please follow up with your surgeon in {d} weeks.",
    "Avoid aspirin unless your cardiologist tells you otherwise.",
    "Take a stool softener for constipation while on narcotics.",
];

const CONDITIONS: &[&str] = &["atrial fibrillation", "pneumonia", "heart failure", "a bleeding ulcer", "diabetes"];
const SYMPTOMS: &[&str] = &["chest pain", "shortness of breath", "dizziness", "abdominal pain", "fever"];
const MEDS: &[&str] = &["Coumadin", "metoprolol", "Lasix", "insulin", "a PPI", "antibiotics"];

fn fill(template: &str, rng: &mut ChaCha8Rng) -> String {
    let mut out = template.to_string();
    while let Some(pos) = out.find('{') {
        let end = pos + out[pos..].find('}').expect("closed placeholder");
        let value = match &out[pos + 1..end] {
            "a" => CONDITIONS.choose(rng).unwrap().to_string(),
            "s" => SYMPTOMS.choose(rng).unwrap().to_string(),
            "m" => MEDS.choose(rng).unwrap().to_string(),
            _ => rng.random_range(2..10).to_string(),
        };
        out.replace_range(pos..=end, &value);
    }
    out
}

fn pick(pool: &[&str], n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| fill(pool[i], rng)).collect()
}

/// `n` synthetic discharge documents; identical for identical `(n, seed)`.
pub fn demo_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = (0..n)
        .map(|i| {
            let course = pick(COURSE, rng.random_range(7..=10), &mut rng);
            let instr = pick(INSTRUCTIONS, rng.random_range(4..=6), &mut rng);
            Document::new(
                format!("demo-{i:03}"),
                format!("Brief Hospital Course: {}", course.join(" ")),
                format!("Discharge Instructions: {}", instr.join(" ")),
            )
        })
        .collect();
    Corpus::from_documents(docs).expect("generated ids are unique")
}

/// Deterministic offline responder.
///
/// Edit prompts for the annotated examples get their recorded responses.
/// Other edit prompts get a seeded corruption: some reference sentences
/// are dropped and short article sentences are spliced in. Judge prompts
/// are scored from unigram overlap with the reference.
#[derive(Debug, Clone, Default)]
pub struct ScriptedTransport {
    known: BTreeMap<(String, String), String>,
}

impl ScriptedTransport {
    pub fn new() -> Self {
        let known = annotated_examples()
            .into_iter()
            .map(|e| ((e.article, e.reference_summary), e.raw_response))
            .collect();
        Self { known }
    }

    pub fn shared() -> Arc<dyn Transport> {
        Arc::new(Self::new())
    }

    fn respond(&self, prompt: &str) -> Option<String> {
        if let Some((article, reference)) = prompts::extract_edit_inputs(prompt) {
            if let Some(raw) = self.known.get(&(article.clone(), reference.clone())) {
                return Some(raw.clone());
            }
            return Some(corrupt(&article, &reference, prompt));
        }
        let (_, reference, output) = prompts::extract_geval_inputs(prompt)?;
        let score = 1 + (9.0 * rouge(&output, &reference).r1.f).round() as i64;
        Some(format!("{{\"Factual Consistency\": {score}}}"))
    }
}

fn seed_of(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn corrupt(article: &str, reference: &str, prompt: &str) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_of(prompt));
    let (head, body) = match reference.split_once(": ") {
        Some((h, b)) if h.len() < 40 => (format!("{h}: "), b),
        _ => (String::new(), reference),
    };
    let ref_sents: Vec<&str> = sentences(body);
    let mut art_sents: Vec<&str> = sentences(article)
        .into_iter()
        .map(|s| s.strip_prefix("Brief Hospital Course: ").unwrap_or(s))
        .collect();
    art_sents.sort_by_key(|s| s.split_whitespace().count());
    let k = if ref_sents.len() > 3 { 2 } else { 1 };
    let mut omit: Vec<usize> = (0..ref_sents.len()).collect();
    omit.shuffle(&mut rng);
    omit.truncate(k.min(ref_sents.len().saturating_sub(1)));
    let adds: Vec<&str> = art_sents.iter().take(k).copied().collect();

    let mut kept: Vec<&str> = ref_sents
        .iter()
        .enumerate()
        .filter(|(i, _)| !omit.contains(i))
        .map(|(_, s)| *s)
        .collect();
    for a in &adds {
        let at = rng.random_range(0..=kept.len());
        kept.insert(at, a);
    }
    let mut instructions = Vec::new();
    for (j, a) in adds.iter().enumerate() {
        instructions.push(EditInstruction::new(2 * j + 1, EditOp::Add, *a));
        if let Some(&o) = omit.get(j) {
            instructions.push(EditInstruction::new(2 * j + 2, EditOp::Omit, ref_sents[o]));
        }
    }
    let summary = format!("{head}{}", kept.join(" "));
    format_response(&instructions, &summary)
}

/// Synthesizes every document of `corpus` through the scripted transport
/// and assembles preference pairs. Documents that fail are skipped.
pub async fn scripted_pairs(corpus: &Corpus) -> (Vec<SynthesisResult>, Vec<PreferencePair>) {
    let gw = Gateway::live(ScriptedTransport::shared(), RetryPolicy::default());
    let synth: Vec<SynthesisResult> = synthesize_all(&corpus.documents, &gw, &SynthesisConfig::default(), 8)
        .await
        .into_iter()
        .filter_map(Result::ok)
        .collect();
    let (pairs, _) = assemble(corpus, &synth, FlagPolicy::KeepFlagged).expect("results come from this corpus");
    (synth, pairs)
}

#[async_trait]
impl Transport for ScriptedTransport {
    async fn send(&self, req: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let prompt = req.user_content().unwrap_or_default();
        let content = self
            .respond(prompt)
            .ok_or_else(|| TransportError::Status {
                status: 400,
                body: "scripted transport does not recognise this prompt".into(),
            })?;
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: prompt.split_whitespace().count() as u64,
                completion_tokens: content.split_whitespace().count() as u64,
            },
            content,
            finish_reason: "stop".into(),
            latency_ms: 0.0,
        })
    }
}
