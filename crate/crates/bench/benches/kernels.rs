use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array1;
use std::hint::black_box;

use vilu_bench::{batch_input, dataset};
use vilu_core::metrics::{auroc, fpr_at_tpr};
use vilu_core::zeroshot::zero_shot_accuracy;
use vilu_core::{ViluConfig, ViluModel};

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    for &(k, d) in &[(10, 512), (100, 512)] {
        let ds = dataset(k, d, 2);
        let input = batch_input(&ds, 128);
        let mut model = ViluModel::<f32>::new(ViluConfig::full(d)).unwrap();
        let id = format!("B128_K{k}_d{d}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &input, |b, input| {
            b.iter(|| model.forward_batch(black_box(input.clone())).unwrap())
        });
        let ones = Array1::<f32>::ones(input.len());
        group.bench_with_input(
            BenchmarkId::new("forward_backward", &id),
            &input,
            |b, input| {
                b.iter(|| {
                    let cache = model.forward_batch(input.clone()).unwrap();
                    model.backward(&cache, ones.view()).unwrap();
                })
            },
        );
    }
    group.finish();
}

fn zero_shot(c: &mut Criterion) {
    let ds = dataset(100, 512, 20);
    c.bench_function("zero_shot_accuracy_N2000_K100_d512", |b| {
        b.iter(|| zero_shot_accuracy(black_box(&ds), 1024, 0).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let n = 100_000;
    let scores: Vec<f64> = (0..n)
        .map(|i| ((i * 7919) % 1000) as f64 / 1000.0)
        .collect();
    let errors: Vec<bool> = (0..n).map(|i| (i * 31) % 7 == 0).collect();
    c.bench_function("auroc_100k", |b| {
        b.iter(|| auroc(black_box(&scores), black_box(&errors)).unwrap())
    });
    c.bench_function("fpr95_100k", |b| {
        b.iter(|| fpr_at_tpr(black_box(&scores), black_box(&errors), 0.95).unwrap())
    });
}

criterion_group!(benches, forward_backward, zero_shot, metrics);
criterion_main!(benches);
