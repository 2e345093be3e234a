use std::hint::black_box;

use anomret::ensemble::{sweep_weight, EnsembleConfig, MetricKind, WeightGrid};
use anomret::{cosine_similarity, iterative_ensemble, metrics_report, select_topk_features, topk_rows, GroundTruth};
use anomret_bench::{embeddings, score_matrices};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn cosine(c: &mut Criterion) {
    let mut group = c.benchmark_group("cosine_similarity");
    for n in [256, 1024] {
        let p = embeddings(n, 256);
        group.bench_with_input(BenchmarkId::from_parameter(n), &p, |b, p| {
            b.iter(|| cosine_similarity(black_box(&p.text), black_box(&p.image)).unwrap())
        });
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let s = score_matrices(1024, 1).remove(0);
    let gt = GroundTruth::identity(1024);
    c.bench_function("topk_rows/1024x1024/k10", |b| b.iter(|| topk_rows(black_box(&s), 10).unwrap()));
    c.bench_function("metrics_report/1024x1024", |b| {
        b.iter(|| metrics_report(black_box(&s), &gt, &[1, 5, 10]).unwrap())
    });
    let p = embeddings(1024, 64);
    c.bench_function("select_topk_features/1024x1024/k10", |b| {
        b.iter(|| select_topk_features(&p.image, black_box(&s), 10).unwrap())
    });
}

fn fusion(c: &mut Criterion) {
    let models = score_matrices(512, 3);
    let gt = GroundTruth::identity(512);
    let grid = WeightGrid::default();
    c.bench_function("sweep_weight/512x512", |b| {
        b.iter(|| sweep_weight(&models[0], &models[1], &gt, &grid, MetricKind::RecallAtK(1), 1).unwrap())
    });
    let config = EnsembleConfig::default();
    c.bench_function("iterative_ensemble/3x512x512", |b| {
        b.iter(|| iterative_ensemble(black_box(&models), &gt, &config).unwrap())
    });
}

criterion_group!(benches, cosine, ranking, fusion);
criterion_main!(benches);
