//! Daily re-optimization backtest: per-day model estimation and predictive
//! draws (no look-ahead), weight drift, net-of-cost accounting, benchmark
//! strategies and the subset bootstrap.

mod benchmarks;
mod bootstrap;
mod metrics;

pub use benchmarks::{
    benchmark_weights, jorion_weights, kan_zhou_weights, tu_zhou_weights, BenchmarkInputs,
    Strategy,
};
pub use bootstrap::{bootstrap_run, BootstrapSummary, MetricQuantiles};
pub use metrics::{
    certainty_equivalent_pct, compute_metrics, performance_fee, Metrics, TRADING_DAYS_PER_YEAR,
};

use nalgebra::{DMatrix, DVector};

use crate::covariance::{
    brk_covariance, lw_shrinkage, sample_cov, smooth_and_repair, BlockPartition, KernelConfig,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::market_data::{
    drifted_weights, DayTicks, MarketSim, ReturnPanel, Weights,
};
use crate::optimizer::{
    expected_utility_weights, solve_l1, solve_l2, AllocationProblem, EuSolverConfig, TxCostModel,
};
use crate::pooling::{mixture_predict, optimal_pool, PoolWeights, ScorePanel};
use crate::predictive::{
    estimate_kappa, factor_sv_fit, factor_sv_predictive_covs, gaussian_predict,
    wishart_brk_predict, KappaConfig, ModelKind, ModelState, PredictiveDraws, SvMcmcConfig,
};
use crate::rng::derive_seed;

/// Returns panel plus the optional intraday and capitalization data the
/// high-frequency and buy-and-hold strategies need.
#[derive(Debug, Clone)]
pub struct MarketData {
    pub panel: ReturnPanel,
    /// One entry per panel day when present, in date order.
    pub ticks: Vec<DayTicks>,
    pub caps: Vec<f64>,
}

impl MarketData {
    pub fn from_panel(panel: ReturnPanel) -> Self {
        Self {
            panel,
            ticks: Vec::new(),
            caps: Vec::new(),
        }
    }

    pub fn from_sim(sim: MarketSim) -> Self {
        Self {
            panel: sim.panel,
            ticks: sim.ticks,
            caps: sim.caps,
        }
    }

    /// Restriction to an asset subset (bootstrap).
    pub fn select_assets(&self, indices: &[usize]) -> Result<MarketData> {
        let panel = self.panel.select_assets(indices)?;
        let ticks = self
            .ticks
            .iter()
            .map(|day| DayTicks {
                date: day.date.clone(),
                series: indices.iter().map(|&i| day.series[i].clone()).collect(),
            })
            .collect();
        let caps = if self.caps.is_empty() {
            Vec::new()
        } else {
            indices.iter().map(|&i| self.caps[i]).collect()
        };
        Ok(MarketData { panel, ticks, caps })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverKind {
    /// Zero-mean certainty-equivalent optimization on the model covariance
    /// (closed form for L2 costs, proximal solver for L1).
    CertaintyEquivalent,
    /// Monte-Carlo expected power utility over predictive draws.
    ExpectedUtility { n_draws: usize },
}

#[derive(Debug, Clone)]
pub struct BacktestConfig {
    pub gamma: f64,
    /// Ex-ante cost level passed to cost-aware optimizers.
    pub beta: f64,
    /// Ex-post cost level used in the accounting; defaults to `beta`.
    pub beta_post: Option<f64>,
    pub cost_kind: CostKind,
    pub estimation_window: usize,
    pub pooling_window: usize,
    pub trade_threshold: f64,
    pub seed: u64,
    /// Days before trading starts; defaults to
    /// `estimation_window + pooling_window`.
    pub warmup: Option<usize>,
    pub solver: SolverKind,
    /// Component models pooled by the mixture strategy.
    pub mixture_models: Vec<ModelKind>,
    pub kernel: KernelConfig,
    pub n_liquidity_groups: usize,
    pub kappa: KappaConfig,
    /// Trailing (return, smoothed estimate) pairs in the kappa likelihood.
    pub kappa_window: usize,
    pub kappa_refit_every: usize,
    pub sv: SvMcmcConfig,
    pub sv_factors: usize,
    pub sv_refit_every: usize,
    /// Predictive covariance draws kept per day for SV scoring and solving.
    pub sv_cov_draws: usize,
    /// A run fails when more than this fraction of days hit solver fallback.
    pub max_flagged_frac: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            gamma: 4.0,
            beta: 0.005,
            beta_post: None,
            cost_kind: CostKind::L1,
            estimation_window: 500,
            pooling_window: 250,
            trade_threshold: 1e-5,
            seed: 0,
            warmup: None,
            solver: SolverKind::ExpectedUtility { n_draws: 10_000 },
            mixture_models: vec![ModelKind::GaussianSample, ModelKind::GaussianLw],
            kernel: KernelConfig::default(),
            n_liquidity_groups: 4,
            kappa: KappaConfig::default(),
            kappa_window: 60,
            kappa_refit_every: 5,
            sv: SvMcmcConfig::default(),
            sv_factors: 1,
            sv_refit_every: 5,
            sv_cov_draws: 500,
            max_flagged_frac: 0.01,
        }
    }
}

impl BacktestConfig {
    pub fn warmup_days(&self) -> usize {
        self.warmup
            .unwrap_or(self.estimation_window + self.pooling_window)
    }

    fn ante_cost(&self) -> TxCostModel {
        match self.cost_kind {
            CostKind::L1 => TxCostModel::L1 { beta: self.beta },
            CostKind::L2 => TxCostModel::L2 { beta: self.beta },
        }
    }

    fn post_cost(&self) -> TxCostModel {
        let beta = self.beta_post.unwrap_or(self.beta);
        match self.cost_kind {
            CostKind::L1 => TxCostModel::L1 { beta },
            CostKind::L2 => TxCostModel::L2 { beta },
        }
    }
}

/// Stationarity certificate of one day's proportional-cost solve.
#[derive(Debug, Clone)]
pub struct SolverDiagnostics {
    pub date: String,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub lagrange_mult: f64,
    pub subgradient: Vec<f64>,
    pub ridge_applied: bool,
}

/// Weight path, return accounting and summary metrics of one run.
#[derive(Debug, Clone)]
pub struct BacktestReport {
    pub strategy: String,
    /// Realization dates, one per decision.
    pub dates: Vec<String>,
    /// Row k: weights held during `dates[k]`.
    pub weights: DMatrix<f64>,
    /// Row k: asset returns of the day used to drift into decision k.
    pub held_returns: DMatrix<f64>,
    pub gross_returns: Vec<f64>,
    pub net_returns: Vec<f64>,
    pub costs: Vec<f64>,
    pub turnover: Vec<f64>,
    pub flagged: Vec<usize>,
    /// None when the net-return volatility is zero (Sharpe undefined).
    pub metrics: Option<Metrics>,
    /// Per-day certificates of the proportional-cost solver, when that
    /// solver ran.
    pub diagnostics: Vec<SolverDiagnostics>,
}

/// Per-day model states for every model a strategy needs.
struct Pipeline {
    states: Vec<(ModelKind, Vec<Option<ModelState>>)>,
    /// Score panel rows start at this panel day.
    score_day0: usize,
    score_panel: Option<ScorePanel>,
}

fn required_models(strategy: &Strategy, config: &BacktestConfig) -> Vec<ModelKind> {
    match strategy {
        Strategy::ModelBased { model, .. } => {
            if *model == ModelKind::Mixture {
                config.mixture_models.clone()
            } else {
                vec![*model]
            }
        }
        _ => Vec::new(),
    }
}

fn ce_covariance(state: &ModelState) -> Result<DMatrix<f64>> {
    match state {
        ModelState::Gaussian { sigma } => Ok(sigma.clone()),
        ModelState::WishartBrk { sigma, kappa } => {
            let n = sigma.nrows() as f64;
            // Predictive covariance is kappa/(kappa - N - 1) * sigma when
            // that expectation exists; heavier-tailed draws keep the scale.
            let mut factor = 0.0;
            let mut count = 0usize;
            for &k in kappa {
                if k > n + 1.0 + 1e-9 {
                    factor += k / (k - n - 1.0);
                    count += 1;
                }
            }
            let factor = if count > 0 { factor / count as f64 } else { 1.0 };
            Ok(sigma * factor)
        }
        ModelState::FactorSv { cov_draws } => {
            let mut mean = DMatrix::zeros(cov_draws[0].nrows(), cov_draws[0].ncols());
            for c in cov_draws {
                mean += c;
            }
            Ok(mean / cov_draws.len() as f64)
        }
    }
}

fn draws_from_state(
    state: &ModelState,
    model: ModelKind,
    n_draws: usize,
    seed: u64,
    date: &str,
) -> Result<PredictiveDraws> {
    match state {
        ModelState::Gaussian { sigma } => gaussian_predict(sigma, n_draws, seed, model, date),
        ModelState::WishartBrk { sigma, kappa } => {
            wishart_brk_predict(sigma, kappa, n_draws, seed, date)
        }
        ModelState::FactorSv { cov_draws } => {
            // Sample one Gaussian return per predictive covariance draw.
            let n = cov_draws[0].nrows();
            let mut rng = crate::rng::stream_rng(seed, 0x7372);
            let mut out = DMatrix::zeros(n_draws, n);
            for row in 0..n_draws {
                let cov = &cov_draws[row % cov_draws.len()];
                let chol = crate::linalg::chol_lower(cov)?;
                let z = DVector::from_iterator(n, (0..n).map(|_| {
                    use rand::Rng;
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                }));
                let r = &chol * z;
                for i in 0..n {
                    out[(row, i)] = r[i];
                }
            }
            PredictiveDraws::new(ModelKind::FactorSv, date, out)
        }
    }
}

impl Pipeline {
    fn prepare(strategy: &Strategy, data: &MarketData, config: &BacktestConfig) -> Result<Self> {
        let models = required_models(strategy, config);
        let t_total = data.panel.n_days();
        let warmup = config.warmup_days();
        let needs_scores = strategy.uses_mixture();

        // States are needed from the first scored day (or first decision)
        // through the last decision day.
        let first_state_day = if needs_scores {
            warmup.saturating_sub(config.pooling_window + 1)
        } else {
            warmup
        }
        .max(config.estimation_window.saturating_sub(1));
        let last_state_day = t_total.saturating_sub(2);

        let mut states = Vec::new();
        for model in &models {
            let per_day = build_model_states(*model, data, config, first_state_day, last_state_day)?;
            states.push((*model, per_day));
        }

        // Score panel for pooling: log density of each day's realized return
        // under the state fitted through the previous day.
        let score_day0 = first_state_day + 1;
        let score_panel = if needs_scores {
            let k = states.len();
            let rows = last_state_day + 1 - score_day0 + 1;
            let mut scores = DMatrix::zeros(rows, k);
            for (col, (_, per_day)) in states.iter().enumerate() {
                for row in 0..rows {
                    let day = score_day0 + row;
                    // The density of day `day`'s return under the state
                    // fitted through the previous day: no look-ahead.
                    let state = per_day[day - 1 - first_state_day].as_ref().ok_or_else(|| {
                        Error::Data(format!(
                            "model {} unavailable on day {} for scoring",
                            models[col],
                            data.panel.dates()[day - 1]
                        ))
                    })?;
                    let r = data.panel.day(day);
                    scores[(row, col)] = state.log_density(&r)?;
                }
            }
            Some(ScorePanel::new(
                data.panel.dates()[score_day0..=last_state_day + 1].to_vec(),
                models.clone(),
                scores,
            )?)
        } else {
            None
        };

        Ok(Self {
            states: states
                .into_iter()
                .map(|(m, v)| (m, offset_vec(v, first_state_day, t_total)))
                .collect(),
            score_day0,
            score_panel,
        })
    }

    fn state(&self, model: ModelKind, day: usize) -> Option<&ModelState> {
        self.states
            .iter()
            .find(|(m, _)| *m == model)
            .and_then(|(_, v)| v.get(day))
            .and_then(|s| s.as_ref())
    }

    fn pool_weights(&self, day: usize, window: usize) -> Result<PoolWeights> {
        let panel = self
            .score_panel
            .as_ref()
            .ok_or_else(|| Error::Config("no score panel for pooling".into()))?;
        let row = day
            .checked_sub(self.score_day0)
            .ok_or_else(|| Error::Range(format!("day {day} precedes score history")))?;
        optimal_pool(panel, row, window)
    }
}


/// Per-day per-model log predictive scores on a data set: the density of
/// each day's return under the state fitted through the previous day.
/// Returns the panel day index of the first score row alongside the panel.
pub fn compute_score_panel(
    data: &MarketData,
    config: &BacktestConfig,
    models: &[ModelKind],
) -> Result<(usize, ScorePanel)> {
    let strategy = Strategy::ModelBased {
        model: ModelKind::Mixture,
        cost_aware: true,
    };
    let mut cfg = config.clone();
    cfg.mixture_models = models.to_vec();
    let pipeline = Pipeline::prepare(&strategy, data, &cfg)?;
    let panel = pipeline
        .score_panel
        .ok_or_else(|| Error::Data("score panel unavailable".into()))?;
    Ok((pipeline.score_day0, panel))
}

/// Pooling weights for every day with a full trailing window, as
/// `(panel day, weights)` pairs.
pub fn pool_weight_series(
    score_day0: usize,
    panel: &ScorePanel,
    window: usize,
) -> Result<Vec<(usize, PoolWeights)>> {
    let rows = panel.log_scores().nrows();
    let mut out = Vec::new();
    for row in window..rows {
        let c = optimal_pool(panel, row, window)?;
        out.push((score_day0 + row, c));
    }
    Ok(out)
}

/// Re-indexes a `[first_day ..]` state vector onto full panel days.
fn offset_vec(
    v: Vec<Option<ModelState>>,
    first_day: usize,
    t_total: usize,
) -> Vec<Option<ModelState>> {
    let mut out = Vec::with_capacity(t_total);
    out.resize_with(first_day, || None);
    out.extend(v);
    out.resize_with(t_total, || None);
    out
}

fn build_model_states(
    model: ModelKind,
    data: &MarketData,
    config: &BacktestConfig,
    first_day: usize,
    last_day: usize,
) -> Result<Vec<Option<ModelState>>> {
    let panel = &data.panel;
    let h = config.estimation_window;
    let days: Vec<usize> = (first_day..=last_day).collect();
    match model {
        ModelKind::GaussianSample => exec::try_par_map(days, |t| {
            Ok(Some(ModelState::Gaussian {
                sigma: sample_cov(panel, t, h)?.matrix().clone(),
            }))
        }),
        ModelKind::GaussianLw => exec::try_par_map(days, |t| {
            Ok(Some(ModelState::Gaussian {
                sigma: lw_shrinkage(panel, t, h)?.matrix().clone(),
            }))
        }),
        ModelKind::WishartBrk => build_wishart_states(data, config, first_day, last_day),
        ModelKind::FactorSv => build_sv_states(data, config, first_day, last_day),
        ModelKind::Mixture => Err(Error::Config(
            "mixture is pooled from component models, not fitted directly".into(),
        )),
    }
}

fn build_wishart_states(
    data: &MarketData,
    config: &BacktestConfig,
    first_day: usize,
    last_day: usize,
) -> Result<Vec<Option<ModelState>>> {
    if data.ticks.len() != data.panel.n_days() {
        return Err(Error::Data(format!(
            "tick data covers {} days, panel has {}",
            data.ticks.len(),
            data.panel.n_days()
        )));
    }
    let smooth_w = config.kernel.smoothing_window.max(1);
    // Raw estimates are needed far enough back to smooth and to feed the
    // kappa likelihood window.
    let raw_first = first_day.saturating_sub(smooth_w - 1 + config.kappa_window);
    let raw_days: Vec<usize> = (raw_first..=last_day).collect();
    let partition = BlockPartition::by_liquidity(
        &data.ticks[raw_first].series,
        config.n_liquidity_groups,
    )?;
    let raws = exec::try_par_map(raw_days, |d| {
        brk_covariance(
            &data.ticks[d].series,
            &partition,
            &config.kernel,
            &data.panel.dates()[d],
        )
    })?;

    // Smoothed estimate per day: mean of the trailing `smooth_w` raws.
    let smoothed: Vec<crate::covariance::CovarianceEstimate> = (0..raws.len())
        .map(|i| {
            let lo = i.saturating_sub(smooth_w - 1);
            smooth_and_repair(&raws[lo..=i])
        })
        .collect::<Result<_>>()?;

    // Kappa posterior on a refit grid; pairs (r_s, smoothed_{s-1}).
    let grid: Vec<usize> = (first_day..=last_day)
        .filter(|d| (d - first_day).is_multiple_of(config.kappa_refit_every.max(1)))
        .collect();
    let kappa_fits: Vec<(usize, Vec<f64>)> = exec::try_par_map(grid, |t| {
        let mut history = Vec::new();
        let lo = t.saturating_sub(config.kappa_window) + 1;
        for s in lo..=t {
            if s == 0 || s <= raw_first {
                continue;
            }
            let est = &smoothed[s - 1 - raw_first];
            history.push((data.panel.day(s), est.matrix().clone()));
        }
        let seed = derive_seed(config.seed, 0x6b61_0000_0000_0000u64 ^ t as u64);
        let post = estimate_kappa(&history, &config.kappa, seed)?;
        Ok((t, post.draws))
    })?;

    let mut out: Vec<Option<ModelState>> = Vec::with_capacity(last_day + 1 - first_day);
    for t in first_day..=last_day {
        let fit = kappa_fits
            .iter()
            .rev()
            .find(|(d, _)| *d <= t)
            .map(|(_, k)| k.clone())
            .ok_or_else(|| Error::Data(format!("no kappa fit at or before day {t}")))?;
        out.push(Some(ModelState::WishartBrk {
            sigma: smoothed[t - raw_first].matrix().clone(),
            kappa: fit,
        }));
    }
    Ok(out)
}

fn build_sv_states(
    data: &MarketData,
    config: &BacktestConfig,
    first_day: usize,
    last_day: usize,
) -> Result<Vec<Option<ModelState>>> {
    let h = config.estimation_window;
    let grid: Vec<usize> = (first_day..=last_day)
        .filter(|d| (d - first_day).is_multiple_of(config.sv_refit_every.max(1)))
        .collect();
    let panel = &data.panel;
    let fits: Vec<(usize, Vec<crate::predictive::SvDraw>)> = exec::try_par_map(grid, |t| {
        let window = panel.window(t, h.min(t + 1).max(config.sv.min_window))?;
        let seed = derive_seed(config.seed, 0x7376_0000_0000_0000u64 ^ t as u64);
        let draws = factor_sv_fit(&window, config.sv_factors, &config.sv, seed)?;
        Ok((t, draws))
    })?;

    let days: Vec<usize> = (first_day..=last_day).collect();
    exec::try_par_map(days, |t| {
        let (fit_day, draws) = fits
            .iter()
            .rev()
            .find(|(d, _)| *d <= t)
            .ok_or_else(|| Error::Data(format!("no SV fit at or before day {t}")))?;
        let steps = t - fit_day + 1;
        let seed = derive_seed(config.seed, 0x7363_0000_0000_0000u64 ^ t as u64);
        let cov_draws =
            factor_sv_predictive_covs_ahead(draws, config.sv_cov_draws, seed, steps)?;
        Ok(Some(ModelState::FactorSv { cov_draws }))
    })
}

/// Stale fits are propagated additional AR steps (no refiltering of the days
/// since the fit; they only widen the predictive distribution).
fn factor_sv_predictive_covs_ahead(
    draws: &[crate::predictive::SvDraw],
    count: usize,
    seed: u64,
    steps: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if steps <= 1 {
        return factor_sv_predictive_covs(draws, count, seed);
    }
    // Repeated one-step propagation through the AR recursion.
    use rand::Rng;
    use rand_distr::StandardNormal;
    if draws.is_empty() {
        return Err(Error::InsufficientData("no posterior draws".into()));
    }
    let mut rng = crate::rng::stream_rng(seed, 0x7064);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let d = &draws[i % draws.len()];
        let n = d.n_assets();
        let j = d.n_factors();
        let mut xi = d.xi_last.clone();
        for _ in 0..steps {
            for k in 0..n + j {
                let eta: f64 = rng.sample(StandardNormal);
                xi[k] = (d.mu[k] + d.phi[k] * (xi[k] - d.mu[k]) + d.sigma[k] * eta)
                    .clamp(-40.0, 10.0);
            }
        }
        let mut cov = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                let mut acc = 0.0;
                for l in 0..j {
                    acc += d.lambda[(a, l)] * d.lambda[(b, l)] * xi[n + l].exp();
                }
                cov[(a, b)] = acc;
            }
            cov[(a, a)] += xi[a].exp();
        }
        out.push(cov);
    }
    Ok(out)
}

/// Runs the daily protocol for one strategy. Information through day `t`
/// only is used for the decision executed into day `t+1`; solver failures
/// fall back to holding drifted weights and are flagged.
pub fn run_backtest(
    strategy: &Strategy,
    data: &MarketData,
    config: &BacktestConfig,
) -> Result<BacktestReport> {
    let panel = &data.panel;
    let t_total = panel.n_days();
    let n = panel.n_assets();
    let warmup = config.warmup_days();
    if t_total < warmup + 2 {
        return Err(Error::InsufficientData(format!(
            "{t_total} days cannot cover warm-up of {warmup} plus one trade"
        )));
    }

    let pipeline = if strategy.is_model_based() {
        Some(Pipeline::prepare(strategy, data, config)?)
    } else {
        None
    };

    let decisions: Vec<usize> = (warmup..=t_total - 2).collect();
    let mut dates = Vec::with_capacity(decisions.len());
    let mut weights = DMatrix::zeros(decisions.len(), n);
    let mut held = DMatrix::zeros(decisions.len(), n);
    let mut gross_returns = Vec::with_capacity(decisions.len());
    let mut net_returns = Vec::with_capacity(decisions.len());
    let mut costs = Vec::with_capacity(decisions.len());
    let mut turnover = Vec::with_capacity(decisions.len());
    let mut flagged = Vec::new();
    let mut diagnostics = Vec::new();

    let post_cost = config.post_cost();
    let mut previous: Option<Weights> = None;

    for (k, &t) in decisions.iter().enumerate() {
        let r_t = panel.day(t);
        let drifted = match &previous {
            None => Weights::uniform(n),
            Some(w) => drifted_weights(w, &r_t)?,
        };

        let solved = solve_decision(strategy, &pipeline, data, config, t, k, &drifted);
        let (target, diag, flag) = match solved {
            Ok((w, d)) => (w, d, false),
            Err(_) => (drifted.clone(), None, true),
        };
        if let Some(d) = diag {
            diagnostics.push(d);
        }
        if flag {
            flagged.push(k);
        }

        let to: f64 = (target.values() - drifted.values())
            .iter()
            .map(|x| x.abs())
            .sum();
        let cost = post_cost.evaluate(target.values(), drifted.values(), None)?;
        let r_next = panel.day(t + 1);
        let gross = target.values().dot(&r_next);

        dates.push(panel.dates()[t + 1].clone());
        for i in 0..n {
            weights[(k, i)] = target[i];
            held[(k, i)] = r_t[i];
        }
        gross_returns.push(gross);
        net_returns.push(gross - cost);
        costs.push(cost);
        turnover.push(to);
        previous = Some(target);
    }

    if flagged.len() as f64 > config.max_flagged_frac * decisions.len() as f64 {
        return Err(Error::Data(format!(
            "{} of {} days fell back to no-trade (limit {:.1}%)",
            flagged.len(),
            decisions.len(),
            100.0 * config.max_flagged_frac
        )));
    }

    let metrics = match compute_metrics(
        &net_returns,
        &weights,
        &held,
        config.gamma,
        config.trade_threshold,
    ) {
        Ok(m) => Some(m),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };

    Ok(BacktestReport {
        strategy: strategy.label(),
        dates,
        weights,
        held_returns: held,
        gross_returns,
        net_returns,
        costs,
        turnover,
        flagged,
        metrics,
        diagnostics,
    })
}

#[allow(clippy::too_many_arguments)]
fn solve_decision(
    strategy: &Strategy,
    pipeline: &Option<Pipeline>,
    data: &MarketData,
    config: &BacktestConfig,
    t: usize,
    k: usize,
    drifted: &Weights,
) -> Result<(Weights, Option<SolverDiagnostics>)> {
    match strategy {
        Strategy::ModelBased { model, cost_aware } => {
            let pipeline = pipeline.as_ref().expect("pipeline prepared");
            let cost = if *cost_aware {
                config.ante_cost()
            } else {
                TxCostModel::None
            };
            let date = &data.panel.dates()[t];
            match config.solver {
                SolverKind::CertaintyEquivalent => {
                    let sigma = if *model == ModelKind::Mixture {
                        let c = pipeline.pool_weights(t, config.pooling_window)?;
                        let mut mix = DMatrix::zeros(data.panel.n_assets(), data.panel.n_assets());
                        for (idx, mk) in config.mixture_models.iter().enumerate() {
                            let state = pipeline.state(*mk, t).ok_or_else(|| {
                                Error::Data(format!("model {mk} unavailable on {date}"))
                            })?;
                            mix += ce_covariance(state)? * c.values()[idx];
                        }
                        mix
                    } else {
                        let state = pipeline.state(*model, t).ok_or_else(|| {
                            Error::Data(format!("model {model} unavailable on {date}"))
                        })?;
                        ce_covariance(state)?
                    };
                    let problem = AllocationProblem::new(
                        DVector::zeros(sigma.nrows()),
                        sigma,
                        config.gamma,
                        drifted.clone(),
                        cost,
                    )?;
                    match &problem.cost {
                        // At beta = 0 every cost model reduces to the plain
                        // efficient portfolio; use the closed form so that
                        // cost-aware and cost-unaware paths agree exactly.
                        TxCostModel::None | TxCostModel::L1 { beta: 0.0 } => {
                            let p2 = AllocationProblem::new(
                                problem.mu.clone(),
                                problem.sigma.clone(),
                                problem.gamma,
                                problem.omega_plus.clone(),
                                TxCostModel::L2 { beta: 0.0 },
                            )?;
                            solve_l2(&p2).map(|w| (w, None))
                        }
                        TxCostModel::L2 { .. } => solve_l2(&problem).map(|w| (w, None)),
                        TxCostModel::L1 { .. } => {
                            solve_l1(&problem, 1e-8, 50_000).map(|s| {
                                let diag = SolverDiagnostics {
                                    date: date.clone(),
                                    iterations: s.iterations,
                                    kkt_residual: s.kkt_residual,
                                    lagrange_mult: s.lagrange_mult,
                                    subgradient: s.subgradient.iter().cloned().collect(),
                                    ridge_applied: s.ridge_applied,
                                };
                                (s.weights, Some(diag))
                            })
                        }
                        other => Err(Error::Config(format!(
                            "certainty-equivalent solver does not handle {other:?}"
                        ))),
                    }
                }
                SolverKind::ExpectedUtility { n_draws } => {
                    let seed = derive_seed(config.seed, 0x6472_0000_0000_0000u64 ^ t as u64);
                    let draws = if *model == ModelKind::Mixture {
                        let c = pipeline.pool_weights(t, config.pooling_window)?;
                        let mut component_draws = Vec::new();
                        for (idx, mk) in config.mixture_models.iter().enumerate() {
                            let state = pipeline.state(*mk, t).ok_or_else(|| {
                                Error::Data(format!("model {mk} unavailable on {date}"))
                            })?;
                            component_draws.push(draws_from_state(
                                state,
                                *mk,
                                n_draws,
                                derive_seed(seed, idx as u64),
                                date,
                            )?);
                        }
                        let refs: Vec<&PredictiveDraws> = component_draws.iter().collect();
                        mixture_predict(&refs, &c, n_draws, derive_seed(seed, 0x6d), date)?
                    } else {
                        let state = pipeline.state(*model, t).ok_or_else(|| {
                            Error::Data(format!("model {model} unavailable on {date}"))
                        })?;
                        draws_from_state(state, *model, n_draws, seed, date)?
                    };
                    expected_utility_weights(
                        draws.draws(),
                        config.gamma,
                        drifted,
                        &cost,
                        &EuSolverConfig::default(),
                    )
                    .map(|w| (w, None))
                }
            }
        }
        _ => {
            // Benchmarks: estimates on demand.
            let h = config.estimation_window;
            let needs_lw = matches!(
                strategy,
                Strategy::Mvp | Strategy::MvpNoShort | Strategy::GrossExposure { .. }
            );
            let needs_sample = matches!(
                strategy,
                Strategy::TuZhou | Strategy::KanZhou | Strategy::Jorion
            );
            let lw = if needs_lw {
                Some(lw_shrinkage(&data.panel, t, h)?.matrix().clone())
            } else {
                None
            };
            let (mu, sample) = if needs_sample {
                let window = data.panel.window(t, h)?;
                let mean = window.row_mean().transpose();
                let s = sample_cov(&data.panel, t, h)?.matrix().clone();
                (Some(mean), Some(s))
            } else {
                (None, None)
            };
            let cap_weights = if matches!(strategy, Strategy::MarketBuyHold) && k == 0 {
                if data.caps.is_empty() {
                    None
                } else {
                    let total: f64 = data.caps.iter().sum();
                    Some(Weights::new(DVector::from_iterator(
                        data.panel.n_assets(),
                        data.caps.iter().map(|c| c / total),
                    ))?)
                }
            } else {
                None
            };
            let inputs = BenchmarkInputs {
                lw_sigma: lw.as_ref(),
                sample_mu: mu.as_ref(),
                sample_sigma: sample.as_ref(),
                window: h,
                gamma: config.gamma,
                drifted,
                day_index: k,
                cap_weights: cap_weights.as_ref(),
            };
            benchmark_weights(strategy, &inputs).map(|w| (w, None))
        }
    }
}
