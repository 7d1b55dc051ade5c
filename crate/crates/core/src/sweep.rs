//! Ex-ante / ex-post transaction-cost sweep: daily turnover-penalized
//! rebalancing on rolling covariance estimates, evaluated net of costs over
//! a grid of cost levels.
//!
//! Ex-post accounting follows the display convention of the source
//! experiment: quadratic-cost runs subtract `beta * ||trade||_2` (the norm,
//! not its square), proportional-cost runs subtract `beta * ||trade||_1`.

use nalgebra::{DMatrix, DVector};

use crate::backtest::{CostKind, TRADING_DAYS_PER_YEAR};
use crate::covariance::{lw_shrinkage, sample_cov};
use crate::error::{Error, Result};
use crate::exec;
use crate::market_data::{drifted_weights, ReturnPanel, Weights};
use crate::optimizer::{solve_l1, solve_l2, AllocationProblem, TxCostModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepEstimator {
    Sample,
    LedoitWolf,
}

impl std::fmt::Display for SweepEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepEstimator::Sample => f.write_str("sample"),
            SweepEstimator::LedoitWolf => f.write_str("lw"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub estimators: Vec<SweepEstimator>,
    pub cost_kind: CostKind,
    pub gamma: f64,
    pub estimation_window: usize,
    /// Ex-ante cost levels in basis points.
    pub beta_grid_bp: Vec<f64>,
    /// Ex-post cost levels in basis points; `None` evaluates each ex-ante
    /// level at itself (the diagonal).
    pub beta_post_grid_bp: Option<Vec<f64>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            estimators: vec![SweepEstimator::Sample, SweepEstimator::LedoitWolf],
            cost_kind: CostKind::L2,
            gamma: 4.0,
            estimation_window: 60,
            beta_grid_bp: vec![0.0, 1.0, 10.0, 50.0, 100.0, 1000.0],
            beta_post_grid_bp: None,
        }
    }
}

/// One grid cell of the sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub strategy: String,
    pub beta_ante_bp: f64,
    pub beta_post_bp: f64,
    pub mean_net_annual_pct: f64,
    pub sd_net_annual_pct: f64,
    pub sharpe_net_annual: f64,
    /// Average daily L1 turnover, in percent.
    pub avg_turnover_pct: f64,
    /// Average L1 distance to the drifting 1/N buy-and-hold path.
    pub avg_l1_dist_buyhold: f64,
}

struct WeightPath {
    weights: Vec<DVector<f64>>, // held during day t+1 for decision day t
    turnover: Vec<f64>,
    gross: Vec<f64>,
    trade_l1: Vec<f64>,
    trade_l2: Vec<f64>,
    dist_buyhold: Vec<f64>,
}

fn ex_post_net(path: &WeightPath, cost_kind: CostKind, beta_post: f64) -> Vec<f64> {
    path.gross
        .iter()
        .enumerate()
        .map(|(k, &g)| match cost_kind {
            CostKind::L1 => g - beta_post * path.trade_l1[k],
            CostKind::L2 => g - beta_post * path.trade_l2[k],
        })
        .collect()
}

fn annualized(returns: &[f64]) -> (f64, f64, f64) {
    let t = returns.len() as f64;
    let mu = returns.iter().sum::<f64>() / t;
    let var = returns.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / (t - 1.0);
    let sd = var.sqrt();
    let sharpe = if sd > 0.0 {
        mu / sd * TRADING_DAYS_PER_YEAR.sqrt()
    } else {
        f64::NAN
    };
    (
        100.0 * mu * TRADING_DAYS_PER_YEAR,
        100.0 * sd * TRADING_DAYS_PER_YEAR.sqrt(),
        sharpe,
    )
}

/// Runs the sweep on a daily return panel. Weight paths are computed once
/// per (estimator, ex-ante beta) and reused across ex-post levels.
pub fn sweep_beta(panel: &ReturnPanel, config: &SweepConfig) -> Result<Vec<SweepRow>> {
    let h = config.estimation_window;
    let t_total = panel.n_days();
    let n = panel.n_assets();
    if t_total < h + 2 {
        return Err(Error::InsufficientData(format!(
            "{t_total} days cannot cover a {h}-day window plus one trade"
        )));
    }
    for &bp in &config.beta_grid_bp {
        if bp < 0.0 {
            return Err(Error::Config(format!("beta grid value {bp} < 0")));
        }
    }
    let decisions: Vec<usize> = (h - 1..=t_total - 2).collect();

    // Buy-and-hold path: 1/N at the first decision, drift only.
    let mut buyhold: Vec<DVector<f64>> = Vec::with_capacity(decisions.len());
    {
        let mut w = Weights::uniform(n);
        for (k, &t) in decisions.iter().enumerate() {
            if k > 0 {
                w = drifted_weights(&w, &panel.day(t))?;
            }
            buyhold.push(w.values().clone());
        }
    }

    let mut rows = Vec::new();
    for estimator in &config.estimators {
        // Shared per-day estimates across the whole beta grid.
        let estimates: Vec<DMatrix<f64>> = exec::try_par_map(decisions.clone(), |t| {
            let est = match estimator {
                SweepEstimator::Sample => sample_cov(panel, t, h)?,
                SweepEstimator::LedoitWolf => lw_shrinkage(panel, t, h)?,
            };
            Ok(est.matrix().clone())
        })?;

        let paths: Vec<(f64, WeightPath)> =
            exec::try_par_map(config.beta_grid_bp.clone(), |bp| {
                let beta = bp * 1e-4;
                let path = run_path(
                    panel,
                    &decisions,
                    &estimates,
                    &buyhold,
                    config.cost_kind,
                    config.gamma,
                    beta,
                )?;
                Ok((bp, path))
            })?;

        for (bp, path) in &paths {
            let post_levels: Vec<f64> = match &config.beta_post_grid_bp {
                Some(grid) => grid.clone(),
                None => vec![*bp],
            };
            for post_bp in post_levels {
                let net = ex_post_net(path, config.cost_kind, post_bp * 1e-4);
                let (mu, sd, sharpe) = annualized(&net);
                rows.push(SweepRow {
                    strategy: estimator.to_string(),
                    beta_ante_bp: *bp,
                    beta_post_bp: post_bp,
                    mean_net_annual_pct: mu,
                    sd_net_annual_pct: sd,
                    sharpe_net_annual: sharpe,
                    avg_turnover_pct: 100.0 * path.turnover.iter().sum::<f64>()
                        / path.turnover.len() as f64,
                    avg_l1_dist_buyhold: path.dist_buyhold.iter().sum::<f64>()
                        / path.dist_buyhold.len() as f64,
                });
            }
        }
    }

    // Benchmark rows: daily-rebalanced naive and pure buy-and-hold.
    for (label, rebalance) in [("naive", true), ("buyhold", false)] {
        let path = naive_path(panel, &decisions, &buyhold, rebalance)?;
        let post_levels: Vec<f64> = config
            .beta_post_grid_bp
            .clone()
            .unwrap_or_else(|| config.beta_grid_bp.clone());
        for post_bp in post_levels {
            let net = ex_post_net(&path, config.cost_kind, post_bp * 1e-4);
            let (mu, sd, sharpe) = annualized(&net);
            rows.push(SweepRow {
                strategy: label.into(),
                beta_ante_bp: f64::NAN,
                beta_post_bp: post_bp,
                mean_net_annual_pct: mu,
                sd_net_annual_pct: sd,
                sharpe_net_annual: sharpe,
                avg_turnover_pct: 100.0 * path.turnover.iter().sum::<f64>()
                    / path.turnover.len() as f64,
                avg_l1_dist_buyhold: path.dist_buyhold.iter().sum::<f64>()
                    / path.dist_buyhold.len() as f64,
            });
        }
    }

    Ok(rows)
}

fn run_path(
    panel: &ReturnPanel,
    decisions: &[usize],
    estimates: &[DMatrix<f64>],
    buyhold: &[DVector<f64>],
    cost_kind: CostKind,
    gamma: f64,
    beta: f64,
) -> Result<WeightPath> {
    let n = panel.n_assets();
    let mut path = WeightPath {
        weights: Vec::with_capacity(decisions.len()),
        turnover: Vec::with_capacity(decisions.len()),
        gross: Vec::with_capacity(decisions.len()),
        trade_l1: Vec::with_capacity(decisions.len()),
        trade_l2: Vec::with_capacity(decisions.len()),
        dist_buyhold: Vec::with_capacity(decisions.len()),
    };
    let mut previous: Option<Weights> = None;
    for (k, &t) in decisions.iter().enumerate() {
        let drifted = match &previous {
            None => Weights::uniform(n),
            Some(w) => drifted_weights(w, &panel.day(t))?,
        };
        let cost = match cost_kind {
            CostKind::L1 => TxCostModel::L1 { beta },
            CostKind::L2 => TxCostModel::L2 { beta },
        };
        let problem = AllocationProblem::new(
            DVector::zeros(n),
            estimates[k].clone(),
            gamma,
            drifted.clone(),
            cost,
        )?;
        let target = match (cost_kind, beta) {
            (CostKind::L2, _) | (_, 0.0) => {
                let p2 = AllocationProblem::new(
                    problem.mu.clone(),
                    problem.sigma.clone(),
                    gamma,
                    drifted.clone(),
                    TxCostModel::L2 { beta },
                )?;
                solve_l2(&p2)?
            }
            (CostKind::L1, _) => solve_l1(&problem, 1e-8, 100_000)?.weights,
        };

        record_step(&mut path, panel, t, k, &target, &drifted, buyhold);
        previous = Some(target);
    }
    Ok(path)
}

fn naive_path(
    panel: &ReturnPanel,
    decisions: &[usize],
    buyhold: &[DVector<f64>],
    rebalance_daily: bool,
) -> Result<WeightPath> {
    let n = panel.n_assets();
    let mut path = WeightPath {
        weights: Vec::with_capacity(decisions.len()),
        turnover: Vec::with_capacity(decisions.len()),
        gross: Vec::with_capacity(decisions.len()),
        trade_l1: Vec::with_capacity(decisions.len()),
        trade_l2: Vec::with_capacity(decisions.len()),
        dist_buyhold: Vec::with_capacity(decisions.len()),
    };
    let mut previous: Option<Weights> = None;
    for (k, &t) in decisions.iter().enumerate() {
        let drifted = match &previous {
            None => Weights::uniform(n),
            Some(w) => drifted_weights(w, &panel.day(t))?,
        };
        let target = if rebalance_daily {
            Weights::uniform(n)
        } else {
            drifted.clone()
        };
        record_step(&mut path, panel, t, k, &target, &drifted, buyhold);
        previous = Some(target);
    }
    Ok(path)
}

fn record_step(
    path: &mut WeightPath,
    panel: &ReturnPanel,
    t: usize,
    k: usize,
    target: &Weights,
    drifted: &Weights,
    buyhold: &[DVector<f64>],
) {
    let delta = target.values() - drifted.values();
    let l1: f64 = delta.iter().map(|x| x.abs()).sum();
    let l2 = delta.norm();
    let r_next = panel.day(t + 1);
    path.gross.push(target.values().dot(&r_next));
    path.turnover.push(l1);
    path.trade_l1.push(l1);
    path.trade_l2.push(l2);
    path.dist_buyhold
        .push((target.values() - &buyhold[k]).iter().map(|x| x.abs()).sum());
    path.weights.push(target.values().clone());
}
