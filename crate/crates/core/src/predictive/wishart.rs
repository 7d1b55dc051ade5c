//! Gaussian-inverse-Wishart model on smoothed blocked-realized-kernel
//! estimates.
//!
//! Convention: `Sigma_{t+1} ~ IW(kappa, kappa * SigmaHat)`, so that
//! `E[Sigma] = kappa/(kappa - N - 1) * SigmaHat -> SigmaHat` for large kappa
//! and the marginal return distribution is multivariate t with
//! `kappa - N + 1` degrees of freedom and scale
//! `kappa/(kappa - N + 1) * SigmaHat`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{ChiSquared, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::stream_rng;

use super::{mvt_log_density, ModelKind, PredictiveDraws};

/// Degrees of freedom and scale of the inverse-Wishart layer. The scale `b`
/// satisfies `kappa * b = sigma_hat`.
#[derive(Debug, Clone)]
pub struct WishartParams {
    pub kappa: f64,
    pub b: DMatrix<f64>,
}

impl WishartParams {
    pub fn new(kappa: f64, sigma_hat: &DMatrix<f64>) -> Result<Self> {
        let n = sigma_hat.nrows() as f64;
        if !(kappa > n - 1.0) {
            return Err(Error::Validation(format!(
                "kappa {kappa} must exceed N - 1 = {}",
                n - 1.0
            )));
        }
        Ok(Self {
            kappa,
            b: sigma_hat / kappa,
        })
    }

    /// Smoothed kernel estimate `kappa * B`.
    pub fn sigma_hat(&self) -> DMatrix<f64> {
        &self.b * self.kappa
    }
}

#[derive(Debug, Clone)]
pub struct KappaConfig {
    /// Rate of the shifted-exponential prior `kappa = (N-1) + Exp(rate)`.
    pub prior_rate: f64,
    pub n_draws: usize,
    pub burnin: usize,
    /// Random-walk proposal standard deviation.
    pub step: f64,
}

impl Default for KappaConfig {
    fn default() -> Self {
        Self {
            prior_rate: 100.0,
            n_draws: 1_000,
            burnin: 500,
            step: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KappaPosterior {
    pub draws: Vec<f64>,
    pub acceptance_rate: f64,
}

/// Random-walk Metropolis on the degrees of freedom over the marginal
/// t-likelihood of observed returns given per-day kernel estimates, times
/// the shifted-exponential prior.
pub fn estimate_kappa(
    history: &[(DVector<f64>, DMatrix<f64>)],
    config: &KappaConfig,
    seed: u64,
) -> Result<KappaPosterior> {
    let n = history
        .first()
        .map(|(r, _)| r.len())
        .unwrap_or(1) as f64;

    let log_target = |kappa: f64| -> Result<f64> {
        if kappa <= n - 1.0 {
            return Ok(f64::NEG_INFINITY);
        }
        let mut total = -config.prior_rate * (kappa - (n - 1.0));
        for (day, (r, sigma_hat)) in history.iter().enumerate() {
            let dof = kappa - n + 1.0;
            let scale = sigma_hat * (kappa / dof);
            let ld = mvt_log_density(r, dof, &scale).map_err(|e| {
                Error::Data(format!("day {day}: likelihood evaluation failed: {e}"))
            })?;
            if !ld.is_finite() {
                return Err(Error::Data(format!(
                    "day {day}: non-finite likelihood at kappa {kappa}"
                )));
            }
            total += ld;
        }
        Ok(total)
    };

    let mut rng = stream_rng(seed, 0x6b61);
    let mut kappa = n - 1.0 + 1.0 / config.prior_rate + 1.0;
    let mut current = log_target(kappa)?;
    let mut draws = Vec::with_capacity(config.n_draws);
    let mut accepted = 0usize;
    let total_iters = config.burnin + config.n_draws;

    for it in 0..total_iters {
        let z: f64 = rng.sample(StandardNormal);
        let proposal = kappa + config.step * z;
        let cand = log_target(proposal)?;
        let u: f64 = rng.random();
        if cand.is_finite() && u.ln() < cand - current {
            kappa = proposal;
            current = cand;
            accepted += 1;
        }
        if it >= config.burnin {
            draws.push(kappa);
        }
    }

    Ok(KappaPosterior {
        draws,
        acceptance_rate: accepted as f64 / total_iters as f64,
    })
}

/// Draws from `IW(dof, scale)` by inverting a Bartlett-decomposed Wishart
/// draw from `W(dof, scale^-1)`.
pub fn sample_inverse_wishart(
    rng: &mut ChaCha12Rng,
    dof: f64,
    scale: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let m = bartlett_factor(rng, dof, scale)?;
    // Sigma = (M M')^-1 = M'^-1 M^-1.
    let m_inv = m
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::LinAlg("singular Bartlett factor".into()))?;
    Ok(linalg::symmetrize(&(m_inv.transpose() * m_inv)))
}

/// Lower-triangular `M` with `W = M M' ~ Wishart(dof, scale^-1)`.
fn bartlett_factor(rng: &mut ChaCha12Rng, dof: f64, scale: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = scale.nrows();
    if !(dof > n as f64 - 1.0) {
        return Err(Error::Validation(format!(
            "Wishart dof {dof} must exceed N - 1 = {}",
            n - 1
        )));
    }
    let scale_inv = scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinAlg("scale not PD; consider PSD repair".into()))?
        .inverse();
    let u = linalg::chol_lower(&linalg::symmetrize(&scale_inv))?;

    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let chi = ChiSquared::new(dof - i as f64)
            .map_err(|e| Error::Domain(format!("chi-squared dof: {e}")))?;
        a[(i, i)] = rng.sample::<f64, _>(chi).max(1e-300).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(u * a)
}

/// Predictive draws of the Wishart-BRK model: for each draw, a kappa from
/// the posterior, a covariance from the inverse Wishart, then a Gaussian
/// return. Marginally the draws are heavy-tailed.
pub fn wishart_brk_predict(
    sigma_hat: &DMatrix<f64>,
    kappa_draws: &[f64],
    n_draws: usize,
    seed: u64,
    date: &str,
) -> Result<PredictiveDraws> {
    if kappa_draws.is_empty() {
        return Err(Error::Validation("no kappa draws".into()));
    }
    let n = sigma_hat.nrows();
    for &k in kappa_draws {
        if !(k > n as f64 - 1.0) {
            return Err(Error::Validation(format!(
                "kappa draw {k} must exceed N - 1"
            )));
        }
    }
    let mut rng = stream_rng(seed, 0x7769);
    let mut draws = DMatrix::zeros(n_draws, n);
    for row in 0..n_draws {
        let kappa = kappa_draws[row % kappa_draws.len()];
        let scale = sigma_hat * kappa;
        // r = M'^-1 z has covariance (M M')^-1 = the IW draw.
        let m = bartlett_factor(&mut rng, kappa, &scale)?;
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let r = m
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::LinAlg("singular Bartlett factor".into()))?;
        for i in 0..n {
            draws[(row, i)] = r[i];
        }
    }
    PredictiveDraws::new(ModelKind::WishartBrk, date, draws)
}
