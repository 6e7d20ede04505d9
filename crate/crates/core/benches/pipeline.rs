use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use symode::datagen::{build_corpus, CorpusConfig, CountSpec};
use symode::eval::evaluate_predictions;
use symode::exec::Exec;
use symode::infer::{PredictionLine, ScaleConvention};
use symode::integrate::SolverConfig;
use symode::model::{AggregatorKind, Model, ModelConfig};
use symode::train::{batch_gradients, prepare_example};

fn policies() -> Vec<(&'static str, Exec)> {
    vec![
        ("sequential", Exec::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Exec::Parallel),
    ]
}

fn corpus_cfg() -> CorpusConfig {
    let mut cfg = CorpusConfig::mixed_polynomial(16, 3);
    cfg.instances = CountSpec::Fixed(2);
    cfg
}

fn corpus(c: &mut Criterion) {
    let cfg = corpus_cfg();
    let mut group = c.benchmark_group("build_corpus");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| build_corpus(black_box(&cfg), exec).unwrap()));
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let (recs, _) = build_corpus(&corpus_cfg(), Exec::Sequential).unwrap();
    let examples: Vec<_> =
        recs.iter().map(|r| prepare_example(r, 0.0, true, ScaleConvention::DivideByRms).unwrap()).collect();
    let refs: Vec<_> = examples.iter().collect();
    let model = Model::<f32>::new(ModelConfig::toy(AggregatorKind::Attentive), 0).unwrap();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| batch_gradients(&model, black_box(&refs), exec).unwrap()));
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let (recs, _) = build_corpus(&corpus_cfg(), Exec::Sequential).unwrap();
    let preds: Vec<PredictionLine> = recs
        .iter()
        .map(|r| PredictionLine {
            id: r.id,
            instances: r.instances.len(),
            sigma: 0.0,
            expressions: Some(symode::corpus::system_to_strings(&r.system)),
            infix: None,
            tokens: Vec::new(),
            r: 1.0,
            scores: Vec::new(),
            error: None,
        })
        .collect();
    let solver = SolverConfig::default();
    let mut group = c.benchmark_group("evaluate_predictions");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_predictions("truth", black_box(&recs), &preds, 1, &solver, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, corpus, gradients, scoring);
criterion_main!(benches);
