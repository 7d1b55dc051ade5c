//! Performance metrics and utility-based switching fees.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

/// Summary metrics of one backtest run. Annualized fields follow the usual
/// convention (mean x 252, sd x sqrt(252), both in percent); `ce_pct` is the
/// per-day certainty equivalent in percent.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub mu_daily: f64,
    pub sigma_daily: f64,
    pub mu_annual_pct: f64,
    pub sigma_annual_pct: f64,
    pub sharpe_annual: f64,
    pub ce_pct: f64,
    /// Average daily L1 turnover against drifted holdings.
    pub turnover_avg: f64,
    /// Average weight concentration `sum w^2`.
    pub concentration: f64,
    /// Average aggregate short exposure `sum |w| 1{w<0}`.
    pub short_proportion: f64,
    /// Share of days with turnover above the trade threshold, in percent.
    pub pct_trade: f64,
}

impl Metrics {
    pub fn field(&self, name: &str) -> Option<f64> {
        Some(match name {
            "mu_annual_pct" => self.mu_annual_pct,
            "sigma_annual_pct" => self.sigma_annual_pct,
            "sharpe" => self.sharpe_annual,
            "ce_pct" => self.ce_pct,
            "turnover" => self.turnover_avg,
            "concentration" => self.concentration,
            "short_proportion" => self.short_proportion,
            "pct_trade" => self.pct_trade,
            _ => return None,
        })
    }

    pub const FIELDS: [&'static str; 8] = [
        "mu_annual_pct",
        "sigma_annual_pct",
        "sharpe",
        "ce_pct",
        "turnover",
        "concentration",
        "short_proportion",
        "pct_trade",
    ];
}

/// Certainty equivalent in percent per day for power utility.
pub fn certainty_equivalent_pct(net_returns: &[f64], gamma: f64) -> Result<f64> {
    if net_returns.is_empty() {
        return Err(Error::Validation("empty return series".into()));
    }
    for &r in net_returns {
        if 1.0 + r <= 0.0 {
            return Err(Error::Domain(format!("return {r} wipes out the portfolio")));
        }
    }
    let t = net_returns.len() as f64;
    if (gamma - 1.0).abs() < 1e-9 {
        let mean_log: f64 = net_returns.iter().map(|r| r.ln_1p()).sum::<f64>() / t;
        return Ok(100.0 * (mean_log.exp() - 1.0));
    }
    let mean_pow: f64 = net_returns
        .iter()
        .map(|r| (1.0 + r).powf(1.0 - gamma))
        .sum::<f64>()
        / t;
    Ok(100.0 * (mean_pow.powf(1.0 / (1.0 - gamma)) - 1.0))
}

/// Metric block of one run. `weights` holds one row per decision day;
/// `held_returns` row `k` is the asset return realized over the holding day
/// between decision `k-1` and decision `k` (used to drift the previous
/// weights in the turnover definition). Errors with `Undefined` when the
/// return volatility vanishes (Sharpe ratio undefined).
pub fn compute_metrics(
    net_returns: &[f64],
    weights: &DMatrix<f64>,
    held_returns: &DMatrix<f64>,
    gamma: f64,
    trade_threshold: f64,
) -> Result<Metrics> {
    let t = net_returns.len();
    if t < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 observations, got {t}"
        )));
    }
    if weights.nrows() != t || held_returns.nrows() != t || weights.ncols() != held_returns.ncols()
    {
        return Err(Error::Shape(format!(
            "{} returns vs {} weight rows vs {} held-return rows",
            t,
            weights.nrows(),
            held_returns.nrows()
        )));
    }
    let tf = t as f64;
    let mu = net_returns.iter().sum::<f64>() / tf;
    let var = net_returns.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / (tf - 1.0);
    let sigma = var.sqrt();

    let ce = certainty_equivalent_pct(net_returns, gamma)?;

    let n = weights.ncols();
    let mut turnover_sum = 0.0;
    let mut trades = 0usize;
    for k in 1..t {
        let prev = weights.row(k - 1);
        let r = held_returns.row(k);
        let growth: f64 = 1.0 + (0..n).map(|i| prev[i] * r[i]).sum::<f64>();
        let mut to_k = 0.0;
        for i in 0..n {
            let drifted = prev[i] * (1.0 + r[i]) / growth;
            to_k += (weights[(k, i)] - drifted).abs();
        }
        turnover_sum += to_k;
        if to_k > trade_threshold {
            trades += 1;
        }
    }
    let turnover_avg = turnover_sum / (tf - 1.0);
    let pct_trade = 100.0 * trades as f64 / (tf - 1.0);

    let mut pc = 0.0;
    let mut sp = 0.0;
    for k in 0..t {
        for i in 0..n {
            let w = weights[(k, i)];
            pc += w * w;
            if w < 0.0 {
                sp += w.abs();
            }
        }
    }
    pc /= tf;
    sp /= tf;

    // Accumulated rounding can leave a numerically-zero variance slightly
    // positive; treat volatility below machine noise of the mean as zero.
    if sigma <= 1e-12 * mu.abs().max(1e-30) {
        return Err(Error::Undefined(
            "Sharpe ratio undefined: zero return volatility".into(),
        ));
    }

    Ok(Metrics {
        mu_daily: mu,
        sigma_daily: sigma,
        mu_annual_pct: 100.0 * mu * TRADING_DAYS_PER_YEAR,
        sigma_annual_pct: 100.0 * sigma * TRADING_DAYS_PER_YEAR.sqrt(),
        sharpe_annual: mu / sigma * TRADING_DAYS_PER_YEAR.sqrt(),
        ce_pct: ce,
        turnover_avg,
        concentration: pc,
        short_proportion: sp,
        pct_trade,
    })
}

/// Fee an investor with power utility would pay per period to switch from
/// return stream 1 to return stream 2: the `delta` solving
/// `sum (1 + r1_t)^(1-gamma) = sum (1 + r2_t - delta)^(1-gamma)`,
/// found by bisection on `[-0.5, 0.5]`.
pub fn performance_fee(
    returns_1: &[f64],
    returns_2: &[f64],
    gamma: f64,
    tol: f64,
) -> Result<f64> {
    if returns_1.len() != returns_2.len() || returns_1.is_empty() {
        return Err(Error::Shape(format!(
            "series of {} vs {}",
            returns_1.len(),
            returns_2.len()
        )));
    }
    for &r in returns_1.iter().chain(returns_2.iter()) {
        if 1.0 + r <= 0.0 {
            return Err(Error::Domain(format!("return {r} wipes out the portfolio")));
        }
    }
    let log_branch = (gamma - 1.0).abs() < 1e-9;
    let total = |rs: &[f64], delta: f64| -> f64 {
        rs.iter()
            .map(|&r| {
                let base = 1.0 + r - delta;
                if log_branch {
                    base.ln()
                } else {
                    base.powf(1.0 - gamma)
                }
            })
            .sum()
    };

    let target = total(returns_1, 0.0);
    // Keep 1 + r2 - delta positive throughout the bracket.
    let min_wealth = returns_2
        .iter()
        .map(|&r| 1.0 + r)
        .fold(f64::INFINITY, f64::min);
    let mut lo = -0.5f64;
    let mut hi = 0.5f64.min(min_wealth - 1e-12);
    if hi <= lo {
        return Err(Error::Bracket(
            "no admissible fee bracket: returns too close to ruin".into(),
        ));
    }
    let f = |delta: f64| total(returns_2, delta) - target;
    let (f_lo, f_hi) = (f(lo), f(hi));
    if !(f_lo.is_finite() && f_hi.is_finite()) || f_lo * f_hi > 0.0 {
        return Err(Error::Bracket(format!(
            "no root in [-0.5, {hi:.3}]: f(lo) = {f_lo:.3e}, f(hi) = {f_hi:.3e}"
        )));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) * f_lo > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
