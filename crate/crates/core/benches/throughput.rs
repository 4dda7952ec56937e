//! Sequential versus rayon on the three data-parallel stages: proposal
//! generation, one training epoch and test-set evaluation.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lfvg::embedding::{generate_synthetic_dataset, AlignmentConfig, SynthShape};
use lfvg::evaluation::evaluate_with;
use lfvg::training::{build_proposals, train_with, TrainConfig};
use lfvg::Parallelism;

const MODES: [Parallelism; 2] = [Parallelism::Sequential, Parallelism::Rayon];

fn stages(c: &mut Criterion) {
    let data = generate_synthetic_dataset(&AlignmentConfig::default(), &SynthShape { n_videos: 48, ..SynthShape::default() }).unwrap();
    let (train_split, test_split) = data.split_at(32);
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::bench() };
    let model = train_with(&train_split.training_view(), &cfg, Parallelism::Sequential).unwrap().model;

    let mut group = c.benchmark_group("throughput");
    group.sample_size(10);
    for mode in MODES {
        let name = format!("{mode:?}");
        group.bench_with_input(BenchmarkId::new("proposals", &name), &mode, |b, &m| {
            b.iter(|| build_proposals(&train_split.training_view(), &cfg, m).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("train_epoch", &name), &mode, |b, &m| {
            b.iter(|| train_with(&train_split.training_view(), &cfg, m).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("evaluate", &name), &mode, |b, &m| {
            b.iter(|| evaluate_with(black_box(&model), &test_split, m).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
