use serde::{Deserialize, Serialize};

use super::loss::{dpo_loss_cached, reference_terms, sft_loss, MarginStats, PairTokens};
use super::{AlignmentError, PolicyModel, Vocab};
use crate::preference::PreferencePair;

pub type EncodedPair = PairTokens;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Only used by the DPO objective.
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 100,
            beta: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Loss at the start of each epoch, before that epoch's update.
    pub loss_curve: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
    /// Margins after training (DPO only).
    pub margins: Option<MarginStats>,
}

/// (article, reference summary) → (prompt ids, completion ids + `</s>`).
pub fn encode_sft(vocab: &Vocab, examples: &[(&str, &str)]) -> Vec<(Vec<u32>, Vec<u32>)> {
    examples
        .iter()
        .map(|(p, t)| (vocab.encode(p), vocab.encode_completion(t)))
        .collect()
}

pub fn encode_pairs(vocab: &Vocab, pairs: &[PreferencePair]) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|p| {
            (
                vocab.encode(&p.prompt),
                vocab.encode_completion(&p.chosen),
                vocab.encode_completion(&p.rejected),
            )
        })
        .collect()
}

fn check_finite(loss: f64, epoch: usize) -> Result<(), AlignmentError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(AlignmentError::NonFinite { epoch })
    }
}

/// Full-batch gradient descent on the SFT objective.
pub fn train_sft(
    model: &mut PolicyModel,
    data: &[(Vec<u32>, Vec<u32>)],
    config: &TrainConfig,
) -> Result<TrainOutcome, AlignmentError> {
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let out = sft_loss(model, data)?;
        check_finite(out.loss, epoch)?;
        loss_curve.push(out.loss);
        model.apply(&out.gradients, config.learning_rate)?;
    }
    let final_loss = sft_loss(model, data)?.loss;
    check_finite(final_loss, config.epochs)?;
    Ok(TrainOutcome {
        loss_curve,
        final_loss,
        margins: None,
    })
}

/// Full-batch gradient descent on the DPO objective against a frozen
/// reference. The reference is only read.
pub fn train_dpo(
    policy: &mut PolicyModel,
    reference: &PolicyModel,
    data: &[EncodedPair],
    config: &TrainConfig,
) -> Result<TrainOutcome, AlignmentError> {
    let cached = reference_terms(policy, reference, data, config.beta)?;
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let out = dpo_loss_cached(policy, data, &cached, config.beta)?;
        check_finite(out.loss, epoch)?;
        loss_curve.push(out.loss);
        policy.apply(&out.gradients, config.learning_rate)?;
    }
    let last = dpo_loss_cached(policy, data, &cached, config.beta)?;
    check_finite(last.loss, config.epochs)?;
    Ok(TrainOutcome {
        loss_curve,
        final_loss: last.loss,
        margins: Some(last.margins),
    })
}

/// Settings for the SFT-then-DPO toy run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub context_order: usize,
    pub sft: TrainConfig,
    pub dpo: TrainConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            context_order: 2,
            sft: TrainConfig {
                learning_rate: 20.0,
                epochs: 60,
                beta: 0.0,
                seed: 0,
            },
            dpo: TrainConfig {
                learning_rate: 50.0,
                epochs: 60,
                beta: 0.1,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub pairs: usize,
    pub vocab_size: usize,
    pub sft: TrainOutcome,
    pub dpo: TrainOutcome,
    /// Mean `log p(chosen) - log p(rejected)` under the SFT policy.
    pub gap_at_init: f64,
    /// The same gap after DPO.
    pub gap_after_dpo: f64,
}

/// Mean sequence log-likelihood gap between chosen and rejected completions.
pub fn likelihood_gap(model: &PolicyModel, data: &[EncodedPair]) -> Result<f64, AlignmentError> {
    if data.is_empty() {
        return Err(AlignmentError::EmptyBatch);
    }
    let mut total = 0.0;
    for (p, c, r) in data {
        total += model.logprob(p, c)?.logprob - model.logprob(p, r)?.logprob;
    }
    Ok(total / data.len() as f64)
}

/// Trains a policy on the chosen summaries, then runs DPO from it with a
/// frozen copy as the reference. Returns the aligned policy.
pub fn run_toy(pairs: &[PreferencePair], config: &ToyConfig) -> Result<(PolicyModel, ToyReport), AlignmentError> {
    if pairs.is_empty() {
        return Err(AlignmentError::EmptyBatch);
    }
    let vocab = Vocab::build(
        pairs
            .iter()
            .flat_map(|p| [p.prompt.as_str(), p.chosen.as_str(), p.rejected.as_str()]),
    );
    let sft_data: Vec<(&str, &str)> = pairs.iter().map(|p| (p.prompt.as_str(), p.chosen.as_str())).collect();
    let sft_data = encode_sft(&vocab, &sft_data);
    let mut policy = PolicyModel::uniform(vocab.clone(), config.context_order);
    let sft = train_sft(&mut policy, &sft_data, &config.sft)?;

    let reference = policy.frozen_copy();
    let data = encode_pairs(&vocab, pairs);
    let gap_at_init = likelihood_gap(&policy, &data)?;
    let dpo = train_dpo(&mut policy, &reference, &data, &config.dpo)?;
    let gap_after_dpo = likelihood_gap(&policy, &data)?;
    Ok((
        policy,
        ToyReport {
            pairs: pairs.len(),
            vocab_size: vocab.len(),
            sft,
            dpo,
            gap_at_init,
            gap_after_dpo,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["a b"])
    }

    #[test]
    fn sft_converges_on_repeated_target() {
        let mut m = PolicyModel::uniform(vocab(), 2);
        let data = vec![(vec![3u32], vec![3u32, 4, 4, 1]); 3];
        let cfg = TrainConfig {
            learning_rate: 10.0,
            epochs: 200,
            ..TrainConfig::default()
        };
        let out = train_sft(&mut m, &data, &cfg).unwrap();
        assert_eq!(out.loss_curve.len(), 200);
        assert!(out.final_loss < 0.01, "final loss {}", out.final_loss);
        assert!(out.loss_curve.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn dpo_first_step_below_ln2() {
        let sft = PolicyModel::random(vocab(), 2, 3, 0.5);
        let reference = sft.frozen_copy();
        let mut policy = sft.thawed();
        let data = vec![(vec![3u32], vec![3u32, 4, 1], vec![4u32, 3, 1])];
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 1,
            beta: 0.1,
            seed: 0,
        };
        let out = train_dpo(&mut policy, &reference, &data, &cfg).unwrap();
        assert!((out.loss_curve[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(out.final_loss < std::f64::consts::LN_2);
    }

    #[test]
    fn dpo_converged_margins_positive_and_reference_untouched() {
        let reference = PolicyModel::random(vocab(), 2, 8, 0.5).frozen_copy();
        let before = reference.clone();
        let mut policy = reference.thawed();
        let data = vec![
            (vec![3u32], vec![3u32, 4, 1], vec![4u32, 3, 1]),
            (vec![4u32], vec![4u32, 4, 1], vec![3u32, 1]),
        ];
        let cfg = TrainConfig {
            learning_rate: 1.0,
            epochs: 300,
            beta: 0.1,
            seed: 0,
        };
        let out = train_dpo(&mut policy, &reference, &data, &cfg).unwrap();
        assert!(out.margins.unwrap().per_pair.iter().all(|&m| m > 0.0));
        assert_eq!(reference, before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = vec![(vec![3u32], vec![3u32, 4, 1]), (vec![], vec![4u32, 1])];
        let cfg = TrainConfig::default();
        let mut a = PolicyModel::random(vocab(), 2, 1, 1.0);
        let mut b = a.clone();
        train_sft(&mut a, &data, &cfg).unwrap();
        train_sft(&mut b, &data, &cfg).unwrap();
        assert_eq!(a.to_checkpoint(""), b.to_checkpoint(""));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut m = PolicyModel::uniform(vocab(), 2);
        let data = vec![(vec![], vec![3u32, 1])];
        let cfg = TrainConfig {
            learning_rate: f64::INFINITY,
            epochs: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_sft(&mut m, &data, &cfg),
            Err(AlignmentError::NonFinite { epoch: 1 })
        ));
    }
}
