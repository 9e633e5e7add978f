use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use schemind::eval::{ari, bcubed, nmi};
use schemind::louvain::louvain;
use schemind::structuralize::reliability;
use schemind::{LabeledPartition, ScoringConfig};
use schemind_bench::{planted_graph, random_labels, random_slot_set};
use std::hint::black_box;

fn bench_louvain(c: &mut Criterion) {
    let mut group = c.benchmark_group("louvain");
    for &(k, size) in &[(5, 20), (10, 30), (20, 25)] {
        let g = planted_graph(k, size, 7);
        group.bench_with_input(BenchmarkId::from_parameter(k * size), &g, |b, g| {
            b.iter(|| louvain(black_box(g), 1234))
        });
    }
    group.finish();
}

fn bench_reliability(c: &mut Criterion) {
    let cfg = ScoringConfig::default();
    let mut group = c.benchmark_group("reliability");
    for &vocab in &[5, 20, 60] {
        let set = random_slot_set(vocab, 12, 3);
        group.bench_with_input(BenchmarkId::from_parameter(vocab), &set, |b, s| {
            b.iter(|| reliability(black_box(s), &cfg))
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let mut group = c.benchmark_group("metrics");
    for &n in &[1_000, 10_000] {
        let gold = LabeledPartition::new(random_labels(n, 15, 1)).unwrap();
        let pred = LabeledPartition::new(random_labels(n, 20, 2)).unwrap();
        group.bench_function(BenchmarkId::new("ari", n), |b| b.iter(|| ari(&gold, &pred)));
        group.bench_function(BenchmarkId::new("nmi", n), |b| b.iter(|| nmi(&gold, &pred)));
        group.bench_function(BenchmarkId::new("bcubed", n), |b| {
            b.iter(|| bcubed(&gold, &pred))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_louvain, bench_reliability, bench_metrics);
criterion_main!(benches);
