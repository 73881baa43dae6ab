use serde::{Deserialize, Serialize};

use super::model::Gradients;
use super::{AlignmentError, PolicyModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 0.1,
            epochs: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftOutput {
    pub loss: f64,
    pub gradients: Gradients,
}

/// Per-pair sigmoid arguments `beta * (chosen_delta - rejected_delta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub per_pair: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub positive_fraction: f64,
}

impl MarginStats {
    pub fn from_margins(per_pair: Vec<f64>) -> Self {
        let n = per_pair.len().max(1) as f64;
        let mean = per_pair.iter().sum::<f64>() / n;
        let min = per_pair.iter().copied().fold(f64::INFINITY, f64::min);
        let max = per_pair.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let positive_fraction = per_pair.iter().filter(|&&m| m > 0.0).count() as f64 / n;
        Self {
            per_pair,
            mean,
            min,
            max,
            positive_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoOutput {
    pub loss: f64,
    pub margins: MarginStats,
    pub gradients: Gradients,
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean per-token negative log-likelihood of each target, averaged over
/// the batch, with its gradient.
pub fn sft_loss(model: &PolicyModel, batch: &[(Vec<u32>, Vec<u32>)]) -> Result<SftOutput, AlignmentError> {
    if batch.is_empty() {
        return Err(AlignmentError::EmptyBatch);
    }
    if model.is_frozen() {
        return Err(AlignmentError::Frozen);
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut gradients = Gradients::new(model.vocab().len());
    for (prompt, target) in batch {
        let (lp, g) = model.logprob_with_grad(prompt, target)?;
        let scale = 1.0 / (target.len() as f64 * n);
        loss -= lp * scale;
        gradients.add_scaled(&g, -scale);
    }
    Ok(SftOutput { loss, gradients })
}

/// A pair batch entry: (prompt, chosen, rejected) token ids.
pub type PairTokens = (Vec<u32>, Vec<u32>, Vec<u32>);

/// Preference loss
/// `-mean ln sigmoid(beta * [(lp(y+) - lp_ref(y+)) - (lp(y-) - lp_ref(y-))])`
/// with its gradient with respect to the policy logits only.
pub fn dpo_loss(
    policy: &PolicyModel,
    reference: &PolicyModel,
    batch: &[PairTokens],
    beta: f64,
) -> Result<DpoOutput, AlignmentError> {
    let reference_logprobs = reference_terms(policy, reference, batch, beta)?;
    dpo_loss_cached(policy, batch, &reference_logprobs, beta)
}

/// Validates inputs and returns the reference log-probabilities per pair.
pub(crate) fn reference_terms(
    policy: &PolicyModel,
    reference: &PolicyModel,
    batch: &[PairTokens],
    beta: f64,
) -> Result<Vec<(f64, f64)>, AlignmentError> {
    if batch.is_empty() {
        return Err(AlignmentError::EmptyBatch);
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(AlignmentError::BadBeta(beta));
    }
    if policy.vocab() != reference.vocab() || policy.context_order() != reference.context_order() {
        return Err(AlignmentError::VocabMismatch);
    }
    if !reference.is_frozen() {
        return Err(AlignmentError::ReferenceNotFrozen);
    }
    batch
        .iter()
        .map(|(p, c, r)| Ok((reference.logprob(p, c)?.logprob, reference.logprob(p, r)?.logprob)))
        .collect()
}

pub(crate) fn dpo_loss_cached(
    policy: &PolicyModel,
    batch: &[PairTokens],
    reference_logprobs: &[(f64, f64)],
    beta: f64,
) -> Result<DpoOutput, AlignmentError> {
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut margins = Vec::with_capacity(batch.len());
    let mut gradients = Gradients::new(policy.vocab().len());
    for ((prompt, chosen, rejected), (ref_c, ref_r)) in batch.iter().zip(reference_logprobs) {
        let (lp_c, g_c) = policy.logprob_with_grad(prompt, chosen)?;
        let (lp_r, g_r) = policy.logprob_with_grad(prompt, rejected)?;
        let delta_chosen = lp_c - ref_c;
        let delta_rejected = lp_r - ref_r;
        let u = beta * (delta_chosen - delta_rejected);
        loss += softplus(-u) / n;
        margins.push(u);
        // d(-ln sigmoid(u))/du = sigmoid(u) - 1
        let coeff = (sigmoid(u) - 1.0) * beta / n;
        gradients.add_scaled(&g_c, coeff);
        gradients.add_scaled(&g_r, -coeff);
    }
    Ok(DpoOutput {
        loss,
        margins: MarginStats::from_margins(margins),
        gradients,
    })
}
