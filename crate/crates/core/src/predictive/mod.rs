//! One-step-ahead predictive return distributions: Monte-Carlo draws plus
//! evaluable log densities for each model class.

mod factor_sv;
mod wishart;

pub use factor_sv::{
    factor_sv_fit, factor_sv_predict, factor_sv_predictive_covs, SvDraw, SvMcmcConfig, SvPriors,
};
pub use wishart::{
    estimate_kappa, sample_inverse_wishart, wishart_brk_predict, KappaConfig, KappaPosterior,
    WishartParams,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    WishartBrk,
    FactorSv,
    GaussianSample,
    GaussianLw,
    Mixture,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::WishartBrk => "brk",
            ModelKind::FactorSv => "sv",
            ModelKind::GaussianSample => "sample",
            ModelKind::GaussianLw => "lw",
            ModelKind::Mixture => "mixture",
        };
        f.write_str(s)
    }
}

/// J x N Monte-Carlo sample from a one-step-ahead return distribution.
/// Draws at or below -1 are truncated just above and flagged.
#[derive(Debug, Clone)]
pub struct PredictiveDraws {
    pub model: ModelKind,
    pub date: String,
    draws: DMatrix<f64>,
    pub truncated: bool,
}

const TRUNCATION_FLOOR: f64 = -1.0 + 1e-8;

impl PredictiveDraws {
    pub fn new(model: ModelKind, date: impl Into<String>, mut draws: DMatrix<f64>) -> Result<Self> {
        if draws.nrows() == 0 || draws.ncols() == 0 {
            return Err(Error::Validation("empty draw matrix".into()));
        }
        if draws.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite predictive draw".into()));
        }
        let mut truncated = false;
        for v in draws.iter_mut() {
            if *v <= -1.0 {
                *v = TRUNCATION_FLOOR;
                truncated = true;
            }
        }
        Ok(Self {
            model,
            date: date.into(),
            draws,
            truncated,
        })
    }

    pub fn draws(&self) -> &DMatrix<f64> {
        &self.draws
    }

    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.draws.ncols()
    }
}

/// Natural log of the gamma function (Lanczos, g = 7).
pub(crate) fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507343278686905,
        -0.13857109526572012,
        9.984_369_578_019_572e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = 0.999_999_999_999_809_9;
        let t = x + 7.5;
        for (i, c) in COEF.iter().enumerate() {
            a += c / (x + (i + 1) as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

/// Multivariate normal log density with mean zero.
pub fn mvn_log_density(r: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let n = r.len();
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::Shape(format!(
            "r of {} vs sigma {}x{}",
            n,
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinAlg("covariance not PD in density".into()))?;
    let half_logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
    let q = chol.solve(r).dot(r);
    Ok(-0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln() - half_logdet - 0.5 * q)
}

/// Multivariate Student-t log density with mean zero, `dof` degrees of
/// freedom and scale matrix `scale`.
pub fn mvt_log_density(r: &DVector<f64>, dof: f64, scale: &DMatrix<f64>) -> Result<f64> {
    let n = r.len();
    if scale.nrows() != n || scale.ncols() != n {
        return Err(Error::Shape(format!(
            "r of {} vs scale {}x{}",
            n,
            scale.nrows(),
            scale.ncols()
        )));
    }
    if !(dof > 0.0) {
        return Err(Error::Domain(format!("t dof {dof} must be > 0")));
    }
    let chol = scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinAlg("scale not PD in density".into()))?;
    let half_logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
    let q = chol.solve(r).dot(r);
    let p = n as f64;
    Ok(ln_gamma(0.5 * (dof + p))
        - ln_gamma(0.5 * dof)
        - 0.5 * p * (dof * std::f64::consts::PI).ln()
        - half_logdet
        - 0.5 * (dof + p) * (1.0 + q / dof).ln())
}

pub(crate) fn log_mean_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + (sum / values.len() as f64).ln()
}

/// Everything needed to evaluate one model's predictive density on one day.
#[derive(Debug, Clone)]
pub enum ModelState {
    /// `r ~ N(0, Sigma)`.
    Gaussian { sigma: DMatrix<f64> },
    /// Normal-inverse-Wishart mixture: multivariate t given kappa, averaged
    /// over posterior kappa draws.
    WishartBrk {
        sigma: DMatrix<f64>,
        kappa: Vec<f64>,
    },
    /// Rao-Blackwellized over posterior predictive covariance draws.
    FactorSv { cov_draws: Vec<DMatrix<f64>> },
}

impl ModelState {
    /// Log predictive density at the observed return vector.
    pub fn log_density(&self, r_obs: &DVector<f64>) -> Result<f64> {
        match self {
            ModelState::Gaussian { sigma } => mvn_log_density(r_obs, sigma),
            ModelState::WishartBrk { sigma, kappa } => {
                let n = r_obs.len() as f64;
                let mut vals = Vec::with_capacity(kappa.len());
                for &k in kappa {
                    let dof = k - n + 1.0;
                    if !(dof > 0.0) {
                        return Err(Error::Domain(format!(
                            "kappa {k} leaves non-positive t dof at N = {n}"
                        )));
                    }
                    let scale = sigma * (k / dof);
                    vals.push(mvt_log_density(r_obs, dof, &scale)?);
                }
                Ok(log_mean_exp(&vals))
            }
            ModelState::FactorSv { cov_draws } => {
                let mut vals = Vec::with_capacity(cov_draws.len());
                for cov in cov_draws {
                    vals.push(mvn_log_density(r_obs, cov)?);
                }
                Ok(log_mean_exp(&vals))
            }
        }
    }
}

/// Log predictive score of a fitted model at the observed return.
pub fn log_predictive_score(state: &ModelState, r_obs: &DVector<f64>) -> Result<f64> {
    state.log_density(r_obs)
}

/// `J` iid draws from `N(0, Sigma)`, deterministic per seed.
pub fn gaussian_predict(
    sigma: &DMatrix<f64>,
    n_draws: usize,
    seed: u64,
    model: ModelKind,
    date: &str,
) -> Result<PredictiveDraws> {
    if n_draws == 0 {
        return Err(Error::Validation("need at least one draw".into()));
    }
    let n = sigma.nrows();
    let chol = linalg::chol_lower(sigma)?;
    let mut rng = stream_rng(seed, 0x6a75);
    let mut draws = DMatrix::zeros(n_draws, n);
    for row in 0..n_draws {
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let r = &chol * z;
        for i in 0..n {
            draws[(row, i)] = r[i];
        }
    }
    PredictiveDraws::new(model, date, draws)
}
