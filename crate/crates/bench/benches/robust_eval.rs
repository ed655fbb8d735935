use std::hint::black_box;

use calidro_core::probstats::normal_quantile;
use calidro_core::robust_eval::{robust_sup_dual, robust_sup_primal_oracle, variance_expansion};
use calidro_core::ConstraintValues;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shortfall_like(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z = -10.0 * (1.0 - rng.random::<f64>()).ln();
            (z - 12.0).max(0.0) - 1.0
        })
        .collect()
}

fn bench_robust_eval(c: &mut Criterion) {
    let rho = normal_quantile(0.95).unwrap().powi(2);
    let mut group = c.benchmark_group("robust_sup_dual");
    for n in [100, 1_000, 10_000, 100_000] {
        let values = shortfall_like(n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &values, |b, v| {
            b.iter(|| robust_sup_dual(ConstraintValues::new(black_box(v), rho).unwrap(), 1e-10).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("variance_expansion");
    for n in [1_000, 100_000] {
        let values = shortfall_like(n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &values, |b, v| {
            b.iter(|| variance_expansion(ConstraintValues::new(black_box(v), rho).unwrap()).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("robust_sup_primal_oracle");
    for n in [100, 1_000] {
        let values = shortfall_like(n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &values, |b, v| {
            b.iter(|| robust_sup_primal_oracle(ConstraintValues::new(black_box(v), rho).unwrap()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_robust_eval);
criterion_main!(benches);
