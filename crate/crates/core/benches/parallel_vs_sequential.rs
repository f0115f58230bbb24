//! Compares the rayon-parallel replicate loop against the sequential
//! fallback on a deliberately small Monte Carlo configuration.
//!
//! Run with `cargo bench -p acw-core`. Building with
//! `--no-default-features` makes both measurements sequential, which is a
//! useful sanity check that the fallback path carries no extra overhead.

use acw_core::data::OutcomeType;
use acw_core::estimators::Estimator;
use acw_core::simulation::{run_monte_carlo, Scenario, ScenarioConfig};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn bench_config() -> ScenarioConfig {
    let mut config = ScenarioConfig::new(Scenario::S1, OutcomeType::Continuous, 77);
    config.pop_half = 2_000;
    config.rwe_size = 500;
    config.selection_intercept = -1.0;
    config.reps = 8;
    config.bootstrap_b = 8;
    config
}

fn monte_carlo_loops(c: &mut Criterion) {
    let config = bench_config();
    let estimators = [Estimator::Naive, Estimator::Cw, Estimator::Acw];

    let mut group = c.benchmark_group("monte_carlo");
    group.sample_size(10);
    group.bench_function("sequential_1_thread", |b| {
        b.iter(|| {
            let report = run_monte_carlo(black_box(&config), &estimators, 1).unwrap();
            black_box(report.tau_true_mean)
        })
    });
    group.bench_function("parallel_default_pool", |b| {
        b.iter(|| {
            let report = run_monte_carlo(black_box(&config), &estimators, 0).unwrap();
            black_box(report.tau_true_mean)
        })
    });
    group.finish();
}

criterion_group!(benches, monte_carlo_loops);
criterion_main!(benches);
