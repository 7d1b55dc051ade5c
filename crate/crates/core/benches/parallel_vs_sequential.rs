//! Compares the data-parallel hot paths against single-threaded execution.
//!
//! With the default `parallel` feature the same code runs inside rayon pools
//! of different sizes (results are bit-identical either way); built with
//! `--no-default-features` only the sequential fallback exists and is
//! benched on its own.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use costfolio::backtest::{bootstrap_run, BacktestConfig, MarketData, SolverKind, Strategy};
use costfolio::covariance::{brk_covariance, BlockPartition, KernelConfig};
use costfolio::market_data::Weights;
use costfolio::market_data::{simulate_market, NoiseConfig, SimConfig};
use costfolio::optimizer::{expected_utility_weights, EuSolverConfig, TxCostModel};
use costfolio::predictive::{gaussian_predict, ModelKind};
use nalgebra::DMatrix;

fn tick_sim_config() -> SimConfig {
    SimConfig {
        n_assets: 6,
        n_days: 16,
        tick_intensity: 0.05,
        noise: NoiseConfig { variance: 1e-7 },
        ..SimConfig::default()
    }
}

fn daily_sim_config() -> SimConfig {
    SimConfig {
        n_assets: 6,
        n_days: 220,
        with_ticks: false,
        daily_drift: 3e-4,
        ..SimConfig::default()
    }
}

fn workload_simulate() {
    black_box(simulate_market(&tick_sim_config(), 7).expect("simulate"));
}

fn workload_brk() {
    let sim = simulate_market(&tick_sim_config(), 8).expect("simulate");
    let partition = BlockPartition::by_liquidity(&sim.ticks[0].series, 3).expect("partition");
    let config = KernelConfig::default();
    for day in &sim.ticks {
        black_box(brk_covariance(&day.series, &partition, &config, &day.date).expect("brk"));
    }
}

fn workload_expected_utility(draws: &DMatrix<f64>) {
    let w = expected_utility_weights(
        draws,
        4.0,
        &Weights::uniform(draws.ncols()),
        &TxCostModel::L1 { beta: 0.002 },
        &EuSolverConfig::default(),
    )
    .expect("solver");
    black_box(w);
}

fn workload_bootstrap(data: &MarketData) {
    let config = BacktestConfig {
        estimation_window: 60,
        pooling_window: 0,
        warmup: Some(60),
        solver: SolverKind::CertaintyEquivalent,
        ..BacktestConfig::default()
    };
    let strategy = Strategy::ModelBased {
        model: ModelKind::GaussianSample,
        cost_aware: true,
    };
    black_box(bootstrap_run(&strategy, data, 4, 8, &config, 3).expect("bootstrap"));
}

#[cfg(feature = "parallel")]
fn bench_modes(c: &mut Criterion) {
    let pools: Vec<(String, rayon::ThreadPool)> = [1usize, num_cpus()]
        .iter()
        .map(|&threads| {
            (
                format!("{threads}_threads"),
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .expect("pool"),
            )
        })
        .collect();

    let sigma = DMatrix::<f64>::identity(5, 5) * 1e-4;
    let draws = gaussian_predict(&sigma, 40_000, 1, ModelKind::GaussianSample, "bench")
        .expect("draws")
        .draws()
        .clone();
    let data = MarketData::from_sim(simulate_market(&daily_sim_config(), 9).expect("simulate"));

    let mut group = c.benchmark_group("tick_simulation");
    for (label, pool) in &pools {
        group.bench_function(label.as_str(), |b| b.iter(|| pool.install(workload_simulate)));
    }
    group.finish();

    let mut group = c.benchmark_group("blocked_realized_kernels");
    group.sample_size(10);
    for (label, pool) in &pools {
        group.bench_function(label.as_str(), |b| b.iter(|| pool.install(workload_brk)));
    }
    group.finish();

    let mut group = c.benchmark_group("expected_utility");
    for (label, pool) in &pools {
        group.bench_function(label.as_str(), |b| {
            b.iter(|| pool.install(|| workload_expected_utility(&draws)))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("bootstrap_backtest");
    group.sample_size(10);
    for (label, pool) in &pools {
        group.bench_function(label.as_str(), |b| {
            b.iter(|| pool.install(|| workload_bootstrap(&data)))
        });
    }
    group.finish();
}

#[cfg(feature = "parallel")]
fn num_cpus() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(2)
}

#[cfg(not(feature = "parallel"))]
fn bench_modes(c: &mut Criterion) {
    let sigma = DMatrix::<f64>::identity(5, 5) * 1e-4;
    let draws = gaussian_predict(&sigma, 40_000, 1, ModelKind::GaussianSample, "bench")
        .expect("draws")
        .draws()
        .clone();
    let data = MarketData::from_sim(simulate_market(&daily_sim_config(), 9).expect("simulate"));

    c.bench_function("tick_simulation/sequential", |b| b.iter(workload_simulate));
    let mut group = c.benchmark_group("blocked_realized_kernels");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(workload_brk));
    group.finish();
    c.bench_function("expected_utility/sequential", |b| {
        b.iter(|| workload_expected_utility(&draws))
    });
    let mut group = c.benchmark_group("bootstrap_backtest");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| workload_bootstrap(&data)));
    group.finish();
}

criterion_group!(benches, bench_modes);
criterion_main!(benches);
