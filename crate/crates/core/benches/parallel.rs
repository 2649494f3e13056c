use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mscred::autodiff::Array;
use mscred::config::RunConfig;
use mscred::detect;
use mscred::model::{loss_and_grads, ModelParams};
use mscred::pipeline::{self, Prepared};
use mscred::signature::SignatureBank;
use mscred::Exec;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn toy() -> (RunConfig, Prepared) {
    let run = RunConfig::toy();
    let (raw, _) = pipeline::generate(&run).unwrap();
    let prepared = pipeline::prepare(&run, &raw, Exec::Sequential).unwrap();
    (run, prepared)
}

fn signature_bank(c: &mut Criterion) {
    let run = RunConfig::paper_synthetic();
    let (raw, _) = pipeline::generate(&run).unwrap();
    let anchors = pipeline::Anchors::new(&run).unwrap().test;
    let m = &run.model;
    let mut group = c.benchmark_group("signature_bank_full_test_split");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                SignatureBank::build(black_box(&raw), &anchors, &m.scales, m.h, m.gap, exec)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn batch_gradients(c: &mut Criterion) {
    let (run, prepared) = toy();
    let params = ModelParams::init(&run.model, 1).unwrap();
    let seqs: Vec<Vec<Arc<Array>>> = prepared.anchors.train[..run.train.batch_size]
        .iter()
        .map(|&t| prepared.bank.sequence(t).unwrap())
        .collect();
    let mut group = c.benchmark_group("toy_batch_gradients");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(&seqs, |s| loss_and_grads(&params, s).unwrap()))
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let (run, prepared) = toy();
    let params = ModelParams::init(&run.model, 1).unwrap();
    let anchors = &prepared.anchors.test;
    let mut group = c.benchmark_group("toy_test_residuals");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| detect::residuals(&params, &prepared.bank, anchors, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, signature_bank, batch_gradients, inference);
criterion_main!(benches);
