//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthedit_core::alignment::{
    dpo_loss, gradcheck_suite, relative_error, run_toy, sft_loss, toy_vocab, PairTokens, PolicyModel, ToyConfig,
    GRADCHECK_EPS, GRADCHECK_TOL,
};
use synthedit_core::analysis::{classify_edits, EditType, DEFAULT_THRESHOLD};
use synthedit_core::demo::{annotated_examples, demo_corpus, scripted_pairs, AnnotatedExample};
use synthedit_core::metrics::{cohen_kappa, concept_f1, rouge, ConceptLexicon};
use synthedit_core::prompts::{render_edit, render_geval};
use synthedit_core::synthesis::{parse_response, validate_constraints, SynthesisResult};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_batch(rng: &mut ChaCha8Rng, v: u32) -> Vec<PairTokens> {
    let mut seq = |min: usize, max: usize| -> Vec<u32> {
        let n = rng.random_range(min..=max);
        (0..n).map(|_| rng.random_range(0..v)).collect()
    };
    (0..4).map(|_| (seq(0, 3), seq(1, 5), seq(1, 5))).collect()
}

fn dpo_identity() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyModel::random(toy_vocab(), 2, seed, 3.0);
        let reference = policy.frozen_copy();
        let batch = random_batch(&mut rng, 5);
        for beta in [0.01, 0.1, 0.5, 1.0, 7.0] {
            let loss = dpo_loss(&policy, &reference, &batch, beta).map_err(|e| e.to_string())?.loss;
            worst = worst.max((loss - std::f64::consts::LN_2).abs());
        }
    }
    ensure(worst <= 1e-9, format!("max |loss - ln 2| = {worst:e}"))?;
    Ok(format!("250 batches, max |loss - ln 2| = {worst:.1e}"))
}

/// Brute-force log-likelihood straight from the weight table.
fn oracle_logprob(m: &PolicyModel, prompt: &[u32], completion: &[u32]) -> f64 {
    let v = m.vocab().len() as u32;
    let mut hist = vec![0u32, 0u32];
    hist.extend_from_slice(prompt);
    let mut total = 0.0;
    for &t in completion {
        let ctx = m.context_id(&hist[hist.len() - 2..]);
        let z: f64 = (0..v).map(|j| m.weight(ctx, j).exp()).sum();
        total += (m.weight(ctx, t).exp() / z).ln();
        hist.push(t);
    }
    total
}

fn oracle_sft(m: &PolicyModel, batch: &[(Vec<u32>, Vec<u32>)]) -> f64 {
    batch
        .iter()
        .map(|(p, c)| -oracle_logprob(m, p, c) / c.len() as f64)
        .sum::<f64>()
        / batch.len() as f64
}

fn oracle_dpo(m: &PolicyModel, r: &PolicyModel, batch: &[PairTokens], beta: f64) -> f64 {
    batch
        .iter()
        .map(|(p, c, rj)| {
            let u = beta
                * ((oracle_logprob(m, p, c) - oracle_logprob(r, p, c))
                    - (oracle_logprob(m, p, rj) - oracle_logprob(r, p, rj)));
            -(1.0 / (1.0 + (-u).exp())).ln()
        })
        .sum::<f64>()
        / batch.len() as f64
}

fn gradient_fidelity() -> Check {
    let report = gradcheck_suite(0..20, 0.5);
    ensure(report.passed(), format!("{} failures, first {:?}", report.failures.len(), report.failures.first()))?;

    // Independent loss oracle, differentiated numerically.
    let beta = 0.5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 100..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyModel::random(toy_vocab(), 2, seed, 2.0);
        let reference = PolicyModel::random(toy_vocab(), 2, seed + 1000, 2.0).frozen_copy();
        let batch = random_batch(&mut rng, 5);
        let sft_batch: Vec<_> = batch.iter().map(|(p, c, _)| (p.clone(), c.clone())).collect();
        let sft = sft_loss(&policy, &sft_batch).map_err(|e| e.to_string())?;
        let dpo = dpo_loss(&policy, &reference, &batch, beta).map_err(|e| e.to_string())?;
        ensure((sft.loss - oracle_sft(&policy, &sft_batch)).abs() < 1e-10, "sft loss differs from oracle")?;
        ensure(
            (dpo.loss - oracle_dpo(&policy, &reference, &batch, beta)).abs() < 1e-10,
            "dpo loss differs from oracle",
        )?;
        for ctx in 0..policy.context_count() {
            for tok in 0..5u32 {
                let w = policy.weight(ctx, tok);
                let mut plus = policy.clone();
                plus.set_weight(ctx, tok, w + GRADCHECK_EPS);
                let mut minus = policy.clone();
                minus.set_weight(ctx, tok, w - GRADCHECK_EPS);
                let n_sft = (oracle_sft(&plus, &sft_batch) - oracle_sft(&minus, &sft_batch)) / (2.0 * GRADCHECK_EPS);
                let n_dpo = (oracle_dpo(&plus, &reference, &batch, beta) - oracle_dpo(&minus, &reference, &batch, beta))
                    / (2.0 * GRADCHECK_EPS);
                worst = worst
                    .max(relative_error(sft.gradients.get(ctx, tok), n_sft))
                    .max(relative_error(dpo.gradients.get(ctx, tok), n_dpo));
                checked += 2;
            }
        }
    }
    ensure(worst <= GRADCHECK_TOL, format!("oracle max relative error {worst:e}"))?;
    Ok(format!(
        "40 seeds, {} + {checked} entries, max rel err {:.1e} / {worst:.1e}",
        report.entries_checked, report.max_relative_error
    ))
}

fn beta_linearity() -> Check {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyModel::random(toy_vocab(), 2, seed, 2.0);
        let reference = PolicyModel::random(toy_vocab(), 2, seed + 77, 2.0).frozen_copy();
        let batch = random_batch(&mut rng, 5);
        for beta in [0.05, 0.1, 0.3, 1.0] {
            let a = dpo_loss(&policy, &reference, &batch, beta).map_err(|e| e.to_string())?.margins;
            let b = dpo_loss(&policy, &reference, &batch, 2.0 * beta).map_err(|e| e.to_string())?.margins;
            for (x, y) in a.per_pair.iter().zip(&b.per_pair) {
                if x.abs() > 1e-12 {
                    worst = worst.max((y / x - 2.0).abs());
                    n += 1;
                }
            }
        }
    }
    ensure(n > 0 && worst <= 1e-9, format!("max |ratio - 2| = {worst:e} over {n} margins"))?;
    Ok(format!("{n} margins, max |ratio - 2| = {worst:.1e}"))
}

fn toy_alignment() -> Check {
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let corpus = demo_corpus(50, 7);
    let (_, pairs) = rt.block_on(scripted_pairs(&corpus));
    ensure(pairs.len() == 50, format!("expected 50 pairs, got {}", pairs.len()))?;
    let (_, report) = run_toy(&pairs, &ToyConfig::default()).map_err(|e| e.to_string())?;
    let margins = report.dpo.margins.as_ref().ok_or("no margins")?;
    ensure(
        margins.positive_fraction >= 0.95,
        format!("positive margins on {:.1}% of pairs", 100.0 * margins.positive_fraction),
    )?;
    ensure(
        report.gap_after_dpo > report.gap_at_init,
        format!("gap {} -> {}", report.gap_at_init, report.gap_after_dpo),
    )?;
    Ok(format!(
        "50 pairs, margin > 0 on {:.0}%, chosen-rejected gap {:.2} -> {:.2}",
        100.0 * margins.positive_fraction,
        report.gap_at_init,
        report.gap_after_dpo
    ))
}

fn synthesis_of(ex: &AnnotatedExample) -> SynthesisResult {
    let p = parse_response(&ex.raw_response).expect("fixture parses");
    SynthesisResult {
        document_id: ex.id.clone(),
        validation: validate_constraints(&ex.reference_summary, &p.instructions, &p.hallucinated_summary),
        instructions: p.instructions,
        hallucinated_summary: p.hallucinated_summary,
        raw_response: ex.raw_response.clone(),
        warnings: p.warnings,
    }
}

fn parser_fixtures() -> Check {
    let examples = annotated_examples();
    let mut counts = Vec::new();
    for ex in &examples {
        let p = parse_response(&ex.raw_response).map_err(|e| format!("{}: {e}", ex.id))?;
        ensure(p.instructions.len() == ex.instructions.len(), format!("{}: instruction count", ex.id))?;
        for (i, (got, want)) in p.instructions.iter().zip(&ex.instructions).enumerate() {
            ensure(got.index == i + 1, format!("{}: index {}", ex.id, got.index))?;
            ensure(got.op == want.op && got.span == want.span, format!("{}: instruction {} = {got:?}", ex.id, i + 1))?;
        }
        ensure(p.hallucinated_summary == ex.hallucinated_summary, format!("{}: summary differs", ex.id))?;
        counts.push(p.instructions.len());
    }
    ensure(counts == [8, 12], format!("counts {counts:?}"))?;
    Ok("8 and 12 instructions, summaries verbatim".into())
}

fn classifier_fixtures() -> Check {
    let examples = annotated_examples();
    let find = |ex: &AnnotatedExample, sentence: &str| -> Result<EditType, String> {
        let c = classify_edits(&ex.document(), &synthesis_of(ex), DEFAULT_THRESHOLD).map_err(|e| e.to_string())?;
        c.events
            .iter()
            .find(|e| e.span.trim() == sentence)
            .map(|e| e.edit_type)
            .ok_or_else(|| format!("{}: no event for {sentence:?}", ex.id))
    };
    let t2 = find(&examples[1], "Pt was admitted after catherization after IV hydration.")?;
    ensure(t2 == EditType::AaMi, format!("catherization sentence classified {t2:?}"))?;
    let t1 = find(&examples[0], "Please also take a chewable multivitamin, like Flintstones, daily.")?;
    ensure(t1 == EditType::OrMi, format!("multivitamin sentence classified {t1:?}"))?;
    for ex in &examples {
        let mut s = synthesis_of(ex);
        s.hallucinated_summary = ex.reference_summary.clone();
        let c = classify_edits(&ex.document(), &s, DEFAULT_THRESHOLD).map_err(|e| e.to_string())?;
        ensure(c.events.is_empty(), format!("{}: identity gave {} events", ex.id, c.events.len()))?;
    }
    Ok("AA-MI and OR-MI fixtures, identity yields no events".into())
}

fn brute_kappa(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let ones_a = a.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let ones_b = b.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let chance = ones_a * ones_b + (1.0 - ones_a) * (1.0 - ones_b);
    (agree - chance) / (1.0 - chance)
}

fn kappa_oracle() -> Check {
    let cases: [(&[u8], &[u8]); 2] = [
        (&[0, 1, 0, 1, 0, 1, 0, 1], &[1, 1, 1, 0, 1, 0, 1, 0]),
        (&[1, 1, 0, 1, 0, 1, 1, 1, 1, 1, 0, 1], &[0, 0, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1]),
    ];
    let mut ks = Vec::new();
    for (a, b) in cases {
        let k = cohen_kappa(a, b).map_err(|e| e.to_string())?;
        let o = brute_kappa(a, b);
        ensure((k - o).abs() <= 1e-12, format!("kappa {k} vs oracle {o}"))?;
        ks.push(k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let mut x: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        x[0] = 0;
        x[1] = 1;
        ensure(cohen_kappa(&x, &x) == Ok(1.0), format!("kappa(x, x) != 1 for {x:?}"))?;
    }
    Ok(format!("kappa {:.4} and {:.4}, mean {:.4}; 1000 self-agreement vectors", ks[0], ks[1], (ks[0] + ks[1]) / 2.0))
}

fn metric_identities() -> Check {
    let t = "Please take your medications as prescribed and call with any questions.";
    let s = rouge(t, t);
    ensure(s.r1.f == 1.0 && s.r2.f == 1.0 && s.rl.f == 1.0, "self ROUGE != 1")?;
    let d = rouge("alpha beta gamma", "delta epsilon zeta");
    ensure(d.r1.f == 0.0 && d.r2.f == 0.0 && d.rl.f == 0.0, "disjoint ROUGE != 0")?;

    // Hand tally: candidate unigrams {the, cat, sat}, reference {the, cat, ran, fast}.
    let h = rouge("the cat sat", "the cat ran fast");
    let (p, r) = (2.0 / 3.0, 2.0 / 4.0);
    ensure(
        (h.r1.p - p).abs() <= 1e-12 && (h.r1.r - r).abs() <= 1e-12 && (h.r1.f - 4.0 / 7.0).abs() <= 1e-12,
        format!("R1 {:?}", h.r1),
    )?;

    let lex = ConceptLexicon::demo();
    let c = concept_f1(
        "continue coumadin",
        "anticoagulated with Coumadin for chronic atrial fibrillation",
        &lex,
    )
    .map_err(|e| e.to_string())?;
    ensure(c.p == 1.0 && c.r == 0.5 && (c.f - 2.0 / 3.0).abs() <= 1e-12, format!("concept {c:?}"))?;
    let codes = lex.extract("blood pressure stable");
    ensure(codes.len() == 1 && codes[0].1 == 2, format!("longest match {codes:?}"))?;
    let rep = concept_f1("fever fever fever", "fever", &lex).map_err(|e| e.to_string())?;
    ensure(rep.f == 1.0, "set semantics")?;
    Ok("ROUGE identity/disjoint/hand case, concept-F1 longest match and sets".into())
}

fn prompt_fidelity() -> Check {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures");
    let edit = std::fs::read_to_string(dir.join("edit_prompt.txt")).map_err(|e| e.to_string())?;
    let geval = std::fs::read_to_string(dir.join("geval_prompt.txt")).map_err(|e| e.to_string())?;
    ensure(render_edit("ARTICLE_SENTINEL", "REFERENCE_SENTINEL") == edit, "edit prompt differs from fixture")?;
    ensure(
        render_geval("ARTICLE_SENTINEL", "REFERENCE_SENTINEL", "OUTPUT_SENTINEL") == geval,
        "judge prompt differs from fixture",
    )?;
    ensure(edit.contains("Numbererd List hallucination edits made:"), "spelling")?;
    ensure(edit.contains("»»»» Output Format »»»»"), "delimiters")?;
    Ok(format!("{} + {} bytes identical", edit.len(), geval.len()))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_synthedit"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stderr).into_owned())
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn pipeline_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let s = |p: &Path| p.to_string_lossy().into_owned();
    run_cli(&["demo", "--out", &s(root)])?;
    let cfg = s(&root.join("run.toml"));
    let (a, b) = (root.join("a"), root.join("b"));
    run_cli(&["pipeline", "--config", &cfg, "--mode", "replay", "--workdir", &s(&a)])?;
    run_cli(&["pipeline", "--config", &cfg, "--mode", "replay", "--workdir", &s(&b)])?;
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    ensure(ta.len() == 7, format!("expected 6 artifacts plus manifest, got {}", ta.len()))?;
    ensure(ta == tb, "artifacts differ between runs")?;
    let log = run_cli(&["pipeline", "--config", &cfg, "--mode", "replay", "--workdir", &s(&a)])?;
    ensure(log.matches("skipped").count() == 6, format!("rerun did not skip every stage: {log}"))?;
    ensure(tree_bytes(&a) == ta, "rerun changed artifacts")?;
    Ok(format!("{} files byte-identical, rerun skipped 6 stages", ta.len()))
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { name: "DPO identity check", budget: Some(Duration::from_secs(1)), run: dpo_identity },
        Criterion { name: "Gradient fidelity", budget: Some(Duration::from_secs(10)), run: gradient_fidelity },
        Criterion { name: "Beta linearity", budget: None, run: beta_linearity },
        Criterion { name: "Toy alignment direction", budget: Some(Duration::from_secs(60)), run: toy_alignment },
        Criterion { name: "Parser fixture fidelity", budget: None, run: parser_fixtures },
        Criterion { name: "Classifier fixture checks", budget: None, run: classifier_fixtures },
        Criterion { name: "Kappa oracle", budget: None, run: kappa_oracle },
        Criterion { name: "Metric identities", budget: None, run: metric_identities },
        Criterion { name: "Prompt fidelity", budget: None, run: prompt_fidelity },
        Criterion {
            name: "Offline pipeline determinism",
            budget: Some(Duration::from_secs(120)),
            run: pipeline_determinism,
        },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.to_lowercase().contains(&f.to_lowercase())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS  {:<30} {:>9.2?}  {detail}", c.name, elapsed),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:<30} {:>9.2?}  {why}", c.name, elapsed);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
