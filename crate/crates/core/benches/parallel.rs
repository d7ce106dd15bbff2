//! Sequential versus rayon execution of the data-parallel loops.
//!
//! Without the `parallel` feature only the sequential arm is measured.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kilab::caption::generate_corpus_with;
use kilab::text::build_vocab;
use kilab::world::{caption_inputs, make_world, sample_dataset, sample_dataset_with};
use kilab::zero_shot::{build_prompt_pairs, evaluate_with};
use kilab::{EncoderParams, Exec, Granularity, KnowledgeBase, TrainConfig, WorldConfig};

fn strategies() -> Vec<(&'static str, Exec)> {
    vec![
        ("sequential", Exec::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Exec::Parallel),
    ]
}

fn bench(c: &mut Criterion) {
    let kb = KnowledgeBase::default_kb();
    let world = make_world(WorldConfig::new(kb.clone())).unwrap();
    let data = sample_dataset(&world, 2000, 1).unwrap();
    let inputs = caption_inputs(&kb, &data);
    let corpus =
        generate_corpus_with(Exec::Sequential, &kb, &inputs, Granularity::Fine, 1).unwrap();
    let vocab = build_vocab(&corpus, 1).unwrap();
    let params = EncoderParams::init(&TrainConfig::default(), vocab.len(), world.cfg.feature_dim);
    let prompts = build_prompt_pairs(&kb, Granularity::Medium).unwrap();

    let mut group = c.benchmark_group("sample_dataset");
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sample_dataset_with(exec, &world, 2000, 7).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("generate_corpus");
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_corpus_with(exec, &kb, &inputs, Granularity::Fine, 7).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate");
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_with(exec, &params, &data, &prompts, &vocab).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
