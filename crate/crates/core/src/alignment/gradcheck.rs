use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{dpo_loss, sft_loss, PairTokens};
use super::{PolicyModel, Vocab};

/// Central-difference step.
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Maximum accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Denominator floor so exactly-zero gradients compare by absolute error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seeds: Vec<u64>,
    pub entries_checked: usize,
    pub max_relative_error: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Five-token vocabulary: the three specials plus two words.
pub fn toy_vocab() -> Vocab {
    Vocab::build(["a b"])
}

fn random_seq(rng: &mut ChaCha8Rng, v: u32, min: usize, max: usize) -> Vec<u32> {
    let len = rng.random_range(min..=max);
    (0..len).map(|_| rng.random_range(0..v)).collect()
}

fn random_batch(rng: &mut ChaCha8Rng, v: u32) -> Vec<PairTokens> {
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| {
            (
                random_seq(rng, v, 0, 3),
                random_seq(rng, v, 1, 4),
                random_seq(rng, v, 1, 4),
            )
        })
        .collect()
}

/// Compares analytic SFT and DPO gradients against central differences on
/// every weight of a random order-2 model, for each seed.
pub fn gradcheck_suite(seeds: impl IntoIterator<Item = u64>, beta: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        seeds: Vec::new(),
        entries_checked: 0,
        max_relative_error: 0.0,
        failures: Vec::new(),
    };
    for seed in seeds {
        report.seeds.push(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = toy_vocab();
        let v = vocab.len() as u32;
        let policy = PolicyModel::random(vocab.clone(), 2, rng.random(), 2.0);
        let reference = PolicyModel::random(vocab, 2, rng.random(), 2.0).frozen_copy();
        let batch = random_batch(&mut rng, v);
        let sft_batch: Vec<(Vec<u32>, Vec<u32>)> = batch.iter().map(|(p, c, _)| (p.clone(), c.clone())).collect();

        let sft_grad = sft_loss(&policy, &sft_batch).expect("valid sft batch").gradients;
        let dpo_grad = dpo_loss(&policy, &reference, &batch, beta).expect("valid dpo batch").gradients;

        for ctx in 0..policy.context_count() {
            for tok in 0..v {
                let w = policy.weight(ctx, tok);
                let mut plus = policy.clone();
                plus.set_weight(ctx, tok, w + GRADCHECK_EPS);
                let mut minus = policy.clone();
                minus.set_weight(ctx, tok, w - GRADCHECK_EPS);

                let sft_num = (sft_loss(&plus, &sft_batch).unwrap().loss - sft_loss(&minus, &sft_batch).unwrap().loss)
                    / (2.0 * GRADCHECK_EPS);
                let dpo_num = (dpo_loss(&plus, &reference, &batch, beta).unwrap().loss
                    - dpo_loss(&minus, &reference, &batch, beta).unwrap().loss)
                    / (2.0 * GRADCHECK_EPS);

                for (name, analytic, numeric) in [
                    ("sft", sft_grad.get(ctx, tok), sft_num),
                    ("dpo", dpo_grad.get(ctx, tok), dpo_num),
                ] {
                    let err = relative_error(analytic, numeric);
                    report.entries_checked += 1;
                    report.max_relative_error = report.max_relative_error.max(err);
                    if err > GRADCHECK_TOL {
                        report.failures.push(format!(
                            "seed {seed} {name} ctx {ctx} tok {tok}: analytic {analytic:e} numeric {numeric:e} rel {err:e}"
                        ));
                    }
                }
            }
        }
    }
    report
}
