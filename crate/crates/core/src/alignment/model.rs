use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AlignmentError, Vocab};

/// Log-probability of a completion, with per-token terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceLogProb {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub per_token: Vec<f64>,
}

/// Sparse gradient (or update) over context rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub(crate) rows: BTreeMap<u64, Vec<f64>>,
    width: usize,
}

impl Gradients {
    pub fn new(width: usize) -> Self {
        Self {
            rows: BTreeMap::new(),
            width,
        }
    }

    pub(crate) fn row_mut(&mut self, context: u64) -> &mut Vec<f64> {
        let width = self.width;
        self.rows.entry(context).or_insert_with(|| vec![0.0; width])
    }

    pub fn get(&self, context: u64, token: u32) -> f64 {
        self.rows
            .get(&context)
            .map_or(0.0, |r| r[token as usize])
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            row.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (ctx, row) in &other.rows {
            let dst = self.row_mut(*ctx);
            for (d, s) in dst.iter_mut().zip(row) {
                *d += factor * s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Order-k context table of next-token logits. Rows not yet materialized
/// hold all-zero logits, i.e. a uniform next-token distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    vocab: Vocab,
    context_order: usize,
    rows: BTreeMap<u64, Vec<f64>>,
    frozen: bool,
}

impl PolicyModel {
    pub fn uniform(vocab: Vocab, context_order: usize) -> Self {
        assert!(context_order >= 1, "context order must be at least 1");
        Self {
            vocab,
            context_order,
            rows: BTreeMap::new(),
            frozen: false,
        }
    }

    /// Every row materialized with logits drawn uniformly from `[-scale, scale]`.
    pub fn random(vocab: Vocab, context_order: usize, seed: u64, scale: f64) -> Self {
        let mut model = Self::uniform(vocab, context_order);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = model.vocab.len();
        for ctx in 0..model.context_count() {
            let row = (0..v).map(|_| rng.random_range(-scale..=scale)).collect();
            model.rows.insert(ctx, row);
        }
        model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Unfrozen copy with identical weights.
    pub fn thawed(&self) -> Self {
        let mut m = self.clone();
        m.frozen = false;
        m
    }

    /// Frozen copy with identical weights.
    pub fn frozen_copy(&self) -> Self {
        let mut m = self.clone();
        m.frozen = true;
        m
    }

    pub fn context_count(&self) -> u64 {
        (self.vocab.len() as u64).pow(self.context_order as u32)
    }

    pub fn context_id(&self, context: &[u32]) -> u64 {
        let v = self.vocab.len() as u64;
        context.iter().fold(0, |acc, &t| acc * v + u64::from(t))
    }

    pub fn weight(&self, context: u64, token: u32) -> f64 {
        self.rows
            .get(&context)
            .map_or(0.0, |r| r[token as usize])
    }

    /// Sets one logit, bypassing the frozen flag. For tests and tooling.
    pub fn set_weight(&mut self, context: u64, token: u32, value: f64) {
        let v = self.vocab.len();
        self.rows.entry(context).or_insert_with(|| vec![0.0; v])[token as usize] = value;
    }

    /// Logits of one context row.
    pub fn row(&self, context: u64) -> Vec<f64> {
        self.rows
            .get(&context)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab.len()])
    }

    /// Next-token probabilities (softmax of the row).
    pub fn probabilities(&self, context: u64) -> Vec<f64> {
        softmax(&self.row(context))
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<(), AlignmentError> {
        let v = self.vocab.len() as u32;
        match ids.iter().find(|&&t| t >= v) {
            Some(&t) => Err(AlignmentError::TokenOutOfRange(t)),
            None => Ok(()),
        }
    }

    fn initial_history(&self, prompt: &[u32]) -> Vec<u32> {
        let mut history = vec![self.vocab.bos(); self.context_order];
        history.extend_from_slice(prompt);
        history
    }

    /// Visits each completion position with its context id and target token.
    fn walk(&self, prompt: &[u32], completion: &[u32], mut f: impl FnMut(u64, u32)) {
        let mut history = self.initial_history(prompt);
        for &t in completion {
            let ctx = self.context_id(&history[history.len() - self.context_order..]);
            f(ctx, t);
            history.push(t);
        }
    }

    /// Sum of next-token log-softmax scores of `completion`, with the
    /// context seeded by `prompt`.
    pub fn logprob(&self, prompt: &[u32], completion: &[u32]) -> Result<SequenceLogProb, AlignmentError> {
        if completion.is_empty() {
            return Err(AlignmentError::EmptyCompletion);
        }
        self.check_tokens(prompt)?;
        self.check_tokens(completion)?;
        let mut per_token = Vec::with_capacity(completion.len());
        self.walk(prompt, completion, |ctx, t| {
            let row = self.row(ctx);
            per_token.push(row[t as usize] - log_sum_exp(&row));
        });
        Ok(SequenceLogProb {
            tokens: completion.to_vec(),
            logprob: per_token.iter().sum(),
            per_token,
        })
    }

    /// Log-probability plus its gradient with respect to the logits.
    pub fn logprob_with_grad(
        &self,
        prompt: &[u32],
        completion: &[u32],
    ) -> Result<(f64, Gradients), AlignmentError> {
        if completion.is_empty() {
            return Err(AlignmentError::EmptyCompletion);
        }
        self.check_tokens(prompt)?;
        self.check_tokens(completion)?;
        let mut grads = Gradients::new(self.vocab.len());
        let mut total = 0.0;
        self.walk(prompt, completion, |ctx, t| {
            let row = self.row(ctx);
            let lse = log_sum_exp(&row);
            total += row[t as usize] - lse;
            let g = grads.row_mut(ctx);
            for (j, z) in row.iter().enumerate() {
                g[j] -= (z - lse).exp();
            }
            g[t as usize] += 1.0;
        });
        Ok((total, grads))
    }

    /// `w -= learning_rate * grads`.
    pub fn apply(&mut self, grads: &Gradients, learning_rate: f64) -> Result<(), AlignmentError> {
        if self.frozen {
            return Err(AlignmentError::Frozen);
        }
        let v = self.vocab.len();
        for (ctx, g) in &grads.rows {
            let row = self.rows.entry(*ctx).or_insert_with(|| vec![0.0; v]);
            for (w, d) in row.iter_mut().zip(g) {
                *w -= learning_rate * d;
            }
        }
        Ok(())
    }

    /// Greedy decoding; never emits `<s>` or `<unk>`.
    pub fn generate(&self, prompt: &[u32], max_tokens: usize) -> Vec<u32> {
        let mut history = self.initial_history(prompt);
        let mut out = Vec::new();
        let (bos, unk, eos) = (self.vocab.bos(), self.vocab.unk(), self.vocab.eos());
        for _ in 0..max_tokens {
            let ctx = self.context_id(&history[history.len() - self.context_order..]);
            let row = self.row(ctx);
            let best = row
                .iter()
                .enumerate()
                .filter(|(i, _)| *i as u32 != bos && *i as u32 != unk)
                .fold(None, |acc: Option<(usize, f64)>, (i, &z)| match acc {
                    Some((_, bz)) if bz >= z => acc,
                    _ => Some((i, z)),
                })
                .map(|(i, _)| i as u32)
                .unwrap_or(eos);
            if best == eos {
                break;
            }
            out.push(best);
            history.push(best);
        }
        out
    }

    pub fn to_checkpoint(&self, config_digest: &str) -> Checkpoint {
        Checkpoint {
            vocab: self.vocab.tokens().to_vec(),
            context_order: self.context_order,
            frozen: self.frozen,
            weights: self
                .rows
                .iter()
                .map(|(ctx, logits)| CheckpointRow {
                    context: *ctx,
                    logits: logits.clone(),
                })
                .collect(),
            config_digest: config_digest.to_owned(),
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self, AlignmentError> {
        let vocab = Vocab::from_tokens(cp.vocab.clone())?;
        if cp.context_order == 0 {
            return Err(AlignmentError::BadCheckpoint("context_order is 0".into()));
        }
        let mut model = Self::uniform(vocab, cp.context_order);
        model.frozen = cp.frozen;
        let count = model.context_count();
        for row in &cp.weights {
            if row.context >= count || row.logits.len() != model.vocab.len() {
                return Err(AlignmentError::BadCheckpoint(format!("bad row for context {}", row.context)));
            }
            model.rows.insert(row.context, row.logits.clone());
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub context: u64,
    pub logits: Vec<f64>,
}

/// Serialized model. Rows are listed in ascending context id; omitted rows
/// are all-zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub vocab: Vec<String>,
    pub context_order: usize,
    #[serde(default)]
    pub frozen: bool,
    pub weights: Vec<CheckpointRow>,
    pub config_digest: String,
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|z| (z - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_vocab() -> Vocab {
        Vocab::build(["a b"])
    }

    #[test]
    fn uniform_logprob() {
        let m = PolicyModel::uniform(small_vocab(), 2);
        let lp = m.logprob(&[3], &[3, 4, 1]).unwrap();
        assert_relative_eq!(lp.logprob, -3.0 * 5f64.ln(), epsilon = 1e-12);
        assert_eq!(lp.per_token.len(), 3);
        assert!(lp.per_token.iter().all(|&p| p <= 0.0));
    }

    #[test]
    fn peaked_model_approaches_zero() {
        let mut last = f64::NEG_INFINITY;
        for gap in [1.0, 5.0, 10.0, 30.0] {
            let mut m = PolicyModel::uniform(small_vocab(), 2);
            // argmax chain <s><s> -> a -> b -> </s>
            let seq = [3u32, 4, 1];
            let mut hist = vec![0u32, 0];
            for &t in &seq {
                let ctx = m.context_id(&hist[hist.len() - 2..]);
                m.set_weight(ctx, t, gap);
                hist.push(t);
            }
            let lp = m.logprob(&[], &seq).unwrap().logprob;
            assert!(lp > last && lp <= 0.0);
            last = lp;
        }
        assert!(last > -1e-10);
    }

    #[test]
    fn rows_sum_to_one() {
        let m = PolicyModel::random(small_vocab(), 2, 3, 4.0);
        for ctx in 0..m.context_count() {
            let s: f64 = m.probabilities(ctx).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn brute_force_chain_rule() {
        let m = PolicyModel::random(small_vocab(), 2, 11, 2.0);
        let prompt = [4u32, 3];
        let completion = [3u32, 4, 1];
        // direct softmax per position, multiplied as probabilities
        let mut history = vec![0u32, 0, 4, 3];
        let mut product = 1.0;
        for &t in &completion {
            let n = history.len();
            let ctx = (history[n - 2] as u64) * 5 + history[n - 1] as u64;
            let row: Vec<f64> = (0..5).map(|j| m.weight(ctx, j)).collect();
            let denom: f64 = row.iter().map(|z| z.exp()).sum();
            product *= row[t as usize].exp() / denom;
            history.push(t);
        }
        let lp = m.logprob(&prompt, &completion).unwrap().logprob;
        assert_relative_eq!(lp, product.ln(), epsilon = 1e-12);
    }

    #[test]
    fn errors() {
        let m = PolicyModel::uniform(small_vocab(), 2);
        assert_eq!(m.logprob(&[], &[]).unwrap_err(), AlignmentError::EmptyCompletion);
        assert_eq!(m.logprob(&[], &[9]).unwrap_err(), AlignmentError::TokenOutOfRange(9));
        let mut f = m.frozen_copy();
        assert_eq!(f.apply(&Gradients::new(5), 0.1), Err(AlignmentError::Frozen));
        f.freeze();
        assert!(f.is_frozen());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = PolicyModel::random(small_vocab(), 2, 5, 1.0);
        let cp = m.to_checkpoint("abc");
        let json = serde_json::to_string(&cp).unwrap();
        let back = PolicyModel::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn generate_follows_argmax() {
        let mut m = PolicyModel::uniform(small_vocab(), 2);
        m.set_weight(0, 4, 5.0); // <s><s> -> b
        m.set_weight(4, 1, 5.0); // <s> b -> </s>
        assert_eq!(m.generate(&[], 10), vec![4]);
    }

    proptest! {
        #[test]
        fn logprob_is_additive(
            seed in 0u64..1000,
            prompt in prop::collection::vec(0u32..5, 0..4),
            a in prop::collection::vec(0u32..5, 1..4),
            b in prop::collection::vec(0u32..5, 1..4),
        ) {
            let m = PolicyModel::random(small_vocab(), 2, seed, 2.0);
            let ab: Vec<u32> = a.iter().chain(&b).copied().collect();
            let pa: Vec<u32> = prompt.iter().chain(&a).copied().collect();
            let whole = m.logprob(&prompt, &ab).unwrap().logprob;
            let parts = m.logprob(&prompt, &a).unwrap().logprob + m.logprob(&pa, &b).unwrap().logprob;
            prop_assert!((whole - parts).abs() < 1e-10);
        }
    }
}
