use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use probalign::prob_embedding::pmmd2_linear;
use probalign::{gram_matrix, mmd2, pmmd2, KernelConfig};
use probalign_bench::{domain, point_set, rng};
use std::hint::black_box;

fn level1(c: &mut Criterion) {
    let cfg = KernelConfig::default();
    let mut g = c.benchmark_group("level1");
    for n in [32, 128, 512] {
        let mut r = rng(n as u64);
        let (x, y) = (point_set(&mut r, n, 16), point_set(&mut r, n, 16));
        g.bench_with_input(BenchmarkId::new("gram", n), &n, |b, _| {
            b.iter(|| gram_matrix(&cfg, black_box(&x), black_box(&y)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("mmd2", n), &n, |b, _| {
            b.iter(|| mmd2(&cfg, black_box(&x), black_box(&y)).unwrap())
        });
    }
    g.finish();
}

fn level2(c: &mut Criterion) {
    let cfg = KernelConfig::default();
    let mut g = c.benchmark_group("pmmd2");
    for (n, t) in [(16, 10), (32, 10), (64, 10), (32, 50)] {
        let mut r = rng(1000 + n as u64);
        let (dl, dt) = (domain(&mut r, n, t, 16), domain(&mut r, n, t, 16));
        let id = format!("n{n}_t{t}");
        g.bench_function(BenchmarkId::new("quadratic", &id), |b| {
            b.iter(|| pmmd2(&cfg, black_box(&dl), black_box(&dt)).unwrap())
        });
        g.bench_function(BenchmarkId::new("linear", &id), |b| {
            let mut pr = rng(7);
            b.iter(|| pmmd2_linear(&cfg, black_box(&dl), black_box(&dt), &mut pr).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, level1, level2);
criterion_main!(benches);
