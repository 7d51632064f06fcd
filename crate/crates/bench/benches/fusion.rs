use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use iqan_bench::{fusion_fixture, training_fixture};
use iqan_core::fusion::{compose_core, fuse_via_core, lowrank_fuse};
use iqan_core::optim::Adam;
use iqan_core::LossWeights;

fn fusion(c: &mut Criterion) {
    let mut g = c.benchmark_group("fusion");
    for rank in [1, 3, 8] {
        let (params, q, v) = fusion_fixture(rank);
        let core = compose_core(&params.slices).unwrap();
        g.bench_with_input(BenchmarkId::new("lowrank", rank), &rank, |b, _| {
            b.iter(|| lowrank_fuse(black_box(&q), black_box(&v), &params.slices).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("dense_core", rank), &rank, |b, _| {
            b.iter(|| fuse_via_core(&core, black_box(&q), black_box(&v)).unwrap())
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let (model, examples) = training_fixture(32);
    let batch: Vec<_> = examples.iter().collect();
    c.bench_function("train_step/batch32", |b| {
        b.iter_batched(
            || (model.clone(), Adam::new(2e-3, &model).unwrap()),
            |(mut m, mut opt)| {
                let (_, grads) = m.batch_gradients(&batch, LossWeights::default()).unwrap();
                opt.update(&mut m, &grads).unwrap();
                m
            },
            criterion::BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, fusion, train_step);
criterion_main!(benches);
