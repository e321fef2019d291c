//! Retention head in its three forms, and palette assignment.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use retcomplete_core::palette::fit_kmeans;
use retcomplete_core::retention::{head_gamma, RetentionHeadParams, RetentionState};
use retcomplete_core::rng;
use retcomplete_core::synthetic::smooth_images;
use retcomplete_core::Tensor;

fn retention_forms(c: &mut Criterion) {
    let mut r = rng::stream(0, rng::INIT);
    let head = RetentionHeadParams::random(16, head_gamma(0), 0.1, &mut r);
    let mut group = c.benchmark_group("retention_head");
    for len in [64usize, 256] {
        let x = Tensor::from_fn(&[len, 16], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5);
        group.bench_with_input(BenchmarkId::new("parallel", len), &x, |b, x| b.iter(|| head.parallel(x).unwrap()));
        group.bench_with_input(BenchmarkId::new("chunkwise_32", len), &x, |b, x| {
            b.iter(|| head.chunkwise(x, 32).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("recurrent", len), &x, |b, x| b.iter(|| head.recurrent(x).unwrap()));
    }
    let row = vec![0.1; 16];
    group.bench_function("single_step", |b| {
        let mut state = RetentionState::new(16);
        b.iter(|| head.recurrent_step(&row, &mut state).unwrap())
    });
    group.finish();
}

fn kmeans(c: &mut Criterion) {
    let pixels: Vec<[f64; 3]> = smooth_images(4, 32, 32, 0)
        .iter()
        .flat_map(|im| im.pixels().map(|p| [p[0], p[1], p[2]]).collect::<Vec<_>>())
        .collect();
    let mut group = c.benchmark_group("kmeans");
    group.sample_size(10);
    group.bench_function("k32_10iters", |b| b.iter(|| fit_kmeans(&pixels, 32, 10, 0).unwrap()));
    group.finish();
}

criterion_group!(benches, retention_forms, kmeans);
criterion_main!(benches);
