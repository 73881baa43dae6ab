//! Desk-scale policy alignment: an order-k context-table language model
//! with exact sequence log-probabilities, SFT and DPO objectives with
//! analytic gradients, full-batch gradient descent and a finite-difference
//! gradient checker.

mod gradcheck;
mod loss;
mod model;
mod train;
mod vocab;

pub use gradcheck::{gradcheck_suite, toy_vocab, relative_error, GradCheckReport, GRADCHECK_EPS, GRADCHECK_FLOOR, GRADCHECK_TOL};
pub use loss::{dpo_loss, sft_loss, DpoConfig, DpoOutput, MarginStats, PairTokens, SftOutput};
pub use model::{Checkpoint, Gradients, PolicyModel, SequenceLogProb};
pub use train::{
    encode_pairs, encode_sft, likelihood_gap, run_toy, train_dpo, train_sft, EncodedPair, ToyConfig, ToyReport, TrainConfig,
    TrainOutcome,
};
pub use vocab::{tokenize, Vocab, BOS, EOS, UNK};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AlignmentError {
    #[error("completion is empty")]
    EmptyCompletion,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("model is frozen and cannot be updated")]
    Frozen,
    #[error("reference model must be frozen")]
    ReferenceNotFrozen,
    #[error("policy and reference vocabularies differ")]
    VocabMismatch,
    #[error("token id {0} outside vocabulary")]
    TokenOutOfRange(u32),
    #[error("beta must be positive, got {0}")]
    BadBeta(f64),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("invalid vocabulary: {0}")]
    BadVocab(String),
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
}
