//! Synthetic hallucination-edit preference data for clinical summarization:
//! corpus handling, LLM-driven edit synthesis, edit classification,
//! preference datasets, toy-scale SFT/DPO alignment, factuality metrics
//! and the annotation backend.

pub mod alignment;
pub mod analysis;
pub mod annotation;
pub mod corpus;
pub mod demo;
pub mod gateway;
pub mod metrics;
pub mod preference;
pub mod prompts;
pub mod synthesis;
pub mod text;

pub use analysis::{EditEvent, EditStats, EditType};
pub use corpus::{Corpus, CorpusSplit, Document};
pub use gateway::{ChatRequest, ChatResponse, Gateway};
pub use preference::PreferencePair;
pub use synthesis::{EditInstruction, EditOp, SynthesisResult};
