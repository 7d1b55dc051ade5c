//! Subset bootstrap: the same strategy run on random asset subsets, with
//! empirical quantile bands per metric.

use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{derive_seed, stream_rng};

use super::{run_backtest, BacktestConfig, MarketData, Metrics, Strategy};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct MetricQuantiles {
    pub name: &'static str,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone)]
pub struct BootstrapSummary {
    pub strategy: String,
    pub quantiles: Vec<MetricQuantiles>,
    pub per_subset: Vec<Metrics>,
    /// Net return series per subset, for paired fee comparisons.
    pub per_subset_net_returns: Vec<Vec<f64>>,
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Runs `n_subsets` independent backtests on uniformly sampled asset subsets
/// (without replacement within a subset) and reports 2.5%/97.5% empirical
/// bands per metric. Subset seeds derive from the subset itself, so
/// identical subsets yield identical runs.
pub fn bootstrap_run(
    strategy: &Strategy,
    data: &MarketData,
    subset_size: usize,
    n_subsets: usize,
    config: &BacktestConfig,
    master_seed: u64,
) -> Result<BootstrapSummary> {
    let n = data.panel.n_assets();
    if subset_size > n {
        return Err(Error::Config(format!(
            "subset size {subset_size} exceeds {n} assets"
        )));
    }
    if subset_size == 0 || n_subsets == 0 {
        return Err(Error::Config("need at least one subset and asset".into()));
    }

    let subsets: Vec<Vec<usize>> = (0..n_subsets)
        .map(|s| {
            let mut rng = stream_rng(master_seed, 0xb007_0000_0000_0000u64 ^ s as u64);
            let mut pool: Vec<usize> = (0..n).collect();
            // Partial Fisher-Yates: the first `subset_size` entries.
            for i in 0..subset_size {
                let j = i + rng.random_range(0..n - i);
                pool.swap(i, j);
            }
            let mut subset = pool[..subset_size].to_vec();
            subset.sort_unstable();
            subset
        })
        .collect();

    let runs: Vec<(Metrics, Vec<f64>)> = exec::try_par_map(subsets, |subset| {
        let sliced = data.select_assets(&subset)?;
        // Seed from the subset content: equal subsets, equal runs.
        let subset_hash = subset
            .iter()
            .fold(master_seed, |acc, &i| derive_seed(acc, i as u64 + 1));
        let mut cfg = config.clone();
        cfg.seed = subset_hash;
        let report = run_backtest(strategy, &sliced, &cfg)?;
        let metrics = report.metrics.ok_or_else(|| {
            Error::Undefined("bootstrap subset produced zero-volatility returns".into())
        })?;
        Ok((metrics, report.net_returns))
    })?;
    let (runs, net_series): (Vec<Metrics>, Vec<Vec<f64>>) = runs.into_iter().unzip();

    let mut quantiles = Vec::new();
    for name in Metrics::FIELDS {
        let mut values: Vec<f64> = runs
            .iter()
            .map(|m| m.field(name).expect("known field"))
            .collect();
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        quantiles.push(MetricQuantiles {
            name,
            mean,
            lo: quantile(&values, 0.025),
            hi: quantile(&values, 0.975),
        });
    }

    Ok(BootstrapSummary {
        strategy: strategy.label(),
        quantiles,
        per_subset: runs,
        per_subset_net_returns: net_series,
    })
}
