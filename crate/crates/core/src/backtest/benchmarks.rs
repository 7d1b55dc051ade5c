//! Benchmark allocation rules: naive rebalancing, GMV variants on the
//! shrinkage estimator, two-fund / three-fund combination rules and the
//! Bayes-Stein plug-in.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::market_data::Weights;
use crate::optimizer::{efficient_weights, gmv, gmv_unconstrained, GmvConstraint};

/// Unbiased-inverse rescaling of the sample covariance used by the
/// estimation-risk rules: `Sigma~ = S (h-1)/(h-N-2)`.
fn sigma_tilde(sample: &DMatrix<f64>, window: usize) -> Result<DMatrix<f64>> {
    let n = sample.nrows();
    if window <= n + 2 {
        return Err(Error::Degenerate(format!(
            "window {window} too short for {n} assets (needs h > N + 2)"
        )));
    }
    Ok(sample * ((window as f64 - 1.0) / (window as f64 - n as f64 - 2.0)))
}

/// Expected return of the sample GMV portfolio.
fn mu_gmv(mu: &DVector<f64>, sigma_inv_mu: &DVector<f64>, sigma_inv_ones: &DVector<f64>) -> f64 {
    let ones = DVector::from_element(mu.len(), 1.0);
    ones.dot(sigma_inv_mu) / ones.dot(sigma_inv_ones)
}

/// Combination of the naive portfolio and the plug-in Markowitz rule, after
/// Tu and Zhou (2011). The combination coefficient weighs the estimated
/// expected losses of the two rules; `delta_override` pins it for testing
/// endpoint behavior.
pub fn tu_zhou_weights(
    mu: &DVector<f64>,
    sample: &DMatrix<f64>,
    window: usize,
    gamma: f64,
    delta_override: Option<f64>,
) -> Result<Weights> {
    let n = mu.len();
    let h = window as f64;
    if window <= n + 4 {
        return Err(Error::Degenerate(format!(
            "window {window} too short for {n} assets (needs h > N + 4)"
        )));
    }
    let st = sigma_tilde(sample, window)?;
    let ones = DVector::from_element(n, 1.0);
    let si_mu = linalg::solve_spd(&st, mu)?;
    let theta2 = mu.dot(&si_mu);

    let delta = match delta_override {
        Some(d) => d.clamp(0.0, 1.0),
        None => {
            let w_e = DVector::from_element(n, 1.0 / n as f64);
            let pi1 = w_e.dot(&(sample * &w_e)) - (2.0 / gamma) * w_e.dot(mu)
                + theta2 / (gamma * gamma);
            let c1 = ((h - 2.0) * (h - n as f64 - 2.0))
                / ((h - n as f64 - 1.0) * (h - n as f64 - 4.0));
            let pi2 = (c1 - 1.0) * theta2 / (gamma * gamma)
                + (c1 / (gamma * gamma)) * (n as f64 / h);
            if pi1 + pi2 <= 0.0 {
                0.0
            } else {
                (pi1 / (pi1 + pi2)).clamp(0.0, 1.0)
            }
        }
    };

    let ml = &si_mu / gamma;
    let combined = DVector::from_element(n, 1.0 / n as f64) * (1.0 - delta) + ml * delta;
    normalize_full_investment(combined, &ones)
}

/// Three-fund rule mixing the plug-in tangency and GMV portfolios, after
/// Kan and Zhou (2007), rescaled to full investment.
pub fn kan_zhou_weights(
    mu: &DVector<f64>,
    sample: &DMatrix<f64>,
    window: usize,
    gamma: f64,
) -> Result<Weights> {
    let n = mu.len();
    let h = window as f64;
    if window <= n + 4 {
        return Err(Error::Degenerate(format!(
            "window {window} too short for {n} assets (needs h > N + 4)"
        )));
    }
    let st = sigma_tilde(sample, window)?;
    let ones = DVector::from_element(n, 1.0);
    let si_mu = linalg::solve_spd(&st, mu)?;
    let si_ones = linalg::solve_spd(&st, &ones)?;
    let mg = mu_gmv(mu, &si_mu, &si_ones);
    let psi2 = (mu.dot(&si_mu) - mg * ones.dot(&si_mu)).max(0.0);

    let c3 = ((h - n as f64 - 1.0) * (h - n as f64 - 4.0)) / (h * (h - 2.0));
    let share = psi2 / (psi2 + n as f64 / h);
    let raw = (&si_mu * share + &si_ones * (mg * (1.0 - share))) * (c3 / gamma);
    normalize_full_investment(raw, &ones)
}

/// Bayes-Stein plug-in after Jorion (1986): shrink the mean towards the GMV
/// return, inflate the covariance, then take the efficient portfolio.
pub fn jorion_weights(
    mu: &DVector<f64>,
    sample: &DMatrix<f64>,
    window: usize,
    gamma: f64,
) -> Result<Weights> {
    let n = mu.len();
    let h = window as f64;
    let st = sigma_tilde(sample, window)?;
    let ones = DVector::from_element(n, 1.0);
    let si_mu = linalg::solve_spd(&st, mu)?;
    let si_ones = linalg::solve_spd(&st, &ones)?;
    let mg = mu_gmv(mu, &si_mu, &si_ones);
    let d = mu - &ones * mg;
    let si_d = linalg::solve_spd(&st, &d)?;
    let quad = d.dot(&si_d).max(1e-300);

    let lambda = (n as f64 + 2.0) / quad;
    let v = (n as f64 + 2.0) / ((n as f64 + 2.0) + h * quad);
    let mu_bs = mu * (1.0 - v) + &ones * (v * mg);
    let outer = &ones * ones.transpose();
    let sigma_bs = &st * (1.0 + 1.0 / (h + lambda))
        + outer * (lambda / (h * (h + 1.0 + lambda)) / ones.dot(&si_ones));

    efficient_weights(&mu_bs, &sigma_bs, gamma)
}

fn normalize_full_investment(raw: DVector<f64>, ones: &DVector<f64>) -> Result<Weights> {
    let total = ones.dot(&raw);
    if total.abs() < 1e-12 {
        return Err(Error::Degenerate(
            "combination rule allocates zero net wealth; cannot renormalize".into(),
        ));
    }
    Weights::new(raw / total)
}

/// Strategy tags of the backtest harness.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Model-driven allocation; `cost_aware` passes the transaction-cost
    /// model into the optimizer, otherwise costs only hit the accounting.
    ModelBased {
        model: crate::predictive::ModelKind,
        cost_aware: bool,
    },
    /// 1/N rebalanced every `rebalance_every` trading days (1 = daily).
    Naive { rebalance_every: usize },
    Mvp,
    MvpNoShort,
    GrossExposure { theta: f64 },
    TuZhou,
    KanZhou,
    Jorion,
    MarketBuyHold,
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::ModelBased { model, cost_aware } => {
                if *cost_aware {
                    format!("{model}")
                } else {
                    format!("{model}_no_tc")
                }
            }
            Strategy::Naive { rebalance_every } => {
                if *rebalance_every <= 1 {
                    "naive".into()
                } else {
                    format!("naive_{rebalance_every}d")
                }
            }
            Strategy::Mvp => "mvp".into(),
            Strategy::MvpNoShort => "mvp_no_short".into(),
            Strategy::GrossExposure { theta } => format!("gross_exposure_{theta}"),
            Strategy::TuZhou => "tu_zhou".into(),
            Strategy::KanZhou => "kan_zhou".into(),
            Strategy::Jorion => "jorion".into(),
            Strategy::MarketBuyHold => "market_buy_hold".into(),
        }
    }

    pub fn is_model_based(&self) -> bool {
        matches!(self, Strategy::ModelBased { .. })
    }

    pub fn uses_mixture(&self) -> bool {
        matches!(
            self,
            Strategy::ModelBased {
                model: crate::predictive::ModelKind::Mixture,
                ..
            }
        )
    }
}

/// Per-day inputs for the non-model benchmark rules.
pub struct BenchmarkInputs<'a> {
    /// Shrinkage covariance estimate for the GMV family.
    pub lw_sigma: Option<&'a DMatrix<f64>>,
    /// Window mean and sample covariance for the estimation-risk rules.
    pub sample_mu: Option<&'a DVector<f64>>,
    pub sample_sigma: Option<&'a DMatrix<f64>>,
    pub window: usize,
    pub gamma: f64,
    /// Current drifted holdings.
    pub drifted: &'a Weights,
    /// Days elapsed since the start of the active backtest period.
    pub day_index: usize,
    /// Market-capitalization weights at the start (buy-and-hold strategy).
    pub cap_weights: Option<&'a Weights>,
}

/// Target weights of one benchmark strategy for one day.
pub fn benchmark_weights(strategy: &Strategy, inputs: &BenchmarkInputs<'_>) -> Result<Weights> {
    let n = inputs.drifted.len();
    let need_lw = || {
        inputs
            .lw_sigma
            .ok_or_else(|| Error::Data("shrinkage estimate missing for GMV benchmark".into()))
    };
    let need_sample = || -> Result<(&DVector<f64>, &DMatrix<f64>)> {
        match (inputs.sample_mu, inputs.sample_sigma) {
            (Some(m), Some(s)) => Ok((m, s)),
            _ => Err(Error::Data(
                "sample moments missing for estimation-risk benchmark".into(),
            )),
        }
    };
    match strategy {
        Strategy::ModelBased { .. } => Err(Error::Config(
            "model-based strategies are solved by the backtest engine".into(),
        )),
        Strategy::Naive { rebalance_every } => {
            let every = (*rebalance_every).max(1);
            if inputs.day_index.is_multiple_of(every) {
                Ok(Weights::uniform(n))
            } else {
                Ok(inputs.drifted.clone())
            }
        }
        Strategy::Mvp => gmv_unconstrained(need_lw()?),
        Strategy::MvpNoShort => gmv(need_lw()?, GmvConstraint::NoShort),
        Strategy::GrossExposure { theta } => gmv(need_lw()?, GmvConstraint::GrossExposure(*theta)),
        Strategy::TuZhou => {
            let (mu, s) = need_sample()?;
            tu_zhou_weights(mu, s, inputs.window, inputs.gamma, None)
        }
        Strategy::KanZhou => {
            let (mu, s) = need_sample()?;
            kan_zhou_weights(mu, s, inputs.window, inputs.gamma)
        }
        Strategy::Jorion => {
            let (mu, s) = need_sample()?;
            jorion_weights(mu, s, inputs.window, inputs.gamma)
        }
        Strategy::MarketBuyHold => {
            if inputs.day_index == 0 {
                inputs
                    .cap_weights
                    .cloned()
                    .ok_or_else(|| Error::Data("market caps missing for buy-and-hold".into()))
            } else {
                Ok(inputs.drifted.clone())
            }
        }
    }
}
