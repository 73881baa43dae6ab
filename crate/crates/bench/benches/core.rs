use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthedit_core::alignment::{dpo_loss, sft_loss, PairTokens, PolicyModel, Vocab};
use synthedit_core::analysis::segment;
use synthedit_core::demo::{annotated_examples, demo_corpus};
use synthedit_core::metrics::{concept_f1, rouge, ConceptLexicon};

fn text_benches(c: &mut Criterion) {
    let ex = &annotated_examples()[1];
    let corpus = demo_corpus(20, 3);
    let lexicon = ConceptLexicon::demo();

    c.bench_function("segment_article", |b| b.iter(|| segment(black_box(&ex.article))));
    c.bench_function("rouge_summary_pair", |b| {
        b.iter(|| rouge(black_box(&ex.hallucinated_summary), black_box(&ex.reference_summary)))
    });
    c.bench_function("concept_extract_corpus", |b| {
        b.iter(|| {
            corpus
                .documents
                .iter()
                .map(|d| lexicon.extract(black_box(&d.article)).len())
                .sum::<usize>()
        })
    });
    c.bench_function("concept_f1_summary_pair", |b| {
        b.iter(|| concept_f1(black_box(&ex.hallucinated_summary), black_box(&ex.reference_summary), &lexicon))
    });
}

fn loss_benches(c: &mut Criterion) {
    let corpus = demo_corpus(16, 5);
    let vocab = Vocab::build(corpus.documents.iter().map(|d| d.reference_summary.as_str()));
    let v = vocab.len() as u32;
    let policy = PolicyModel::random(vocab.clone(), 2, 1, 0.5);
    let reference = PolicyModel::random(vocab, 2, 2, 0.5).frozen_copy();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut seq = |n: usize| -> Vec<u32> { (0..n).map(|_| rng.random_range(0..v)).collect() };
    let batch: Vec<PairTokens> = (0..16).map(|_| (seq(20), seq(60), seq(60))).collect();
    let sft: Vec<(Vec<u32>, Vec<u32>)> = batch.iter().map(|(p, c, _)| (p.clone(), c.clone())).collect();

    c.bench_function("dpo_loss_batch16", |b| b.iter(|| dpo_loss(&policy, &reference, black_box(&batch), 0.1)));
    c.bench_function("sft_loss_batch16", |b| b.iter(|| sft_loss(&policy, black_box(&sft))));
}

criterion_group!(benches, text_benches, loss_benches);
criterion_main!(benches);
