//! Factor stochastic-volatility model fitted by Gibbs sampling.
//!
//! Returns follow `r_t = Lambda f_t + e_t` with `e_t ~ N(0, Q(xi_t))`,
//! `f_t ~ N(0, V(xi_t))`, and every latent log-variance an AR(1). Latent
//! volatilities are drawn through the 10-component normal-mixture
//! approximation of the log-chi-squared error, states via the tridiagonal
//! precision sampler, AR parameters via conjugate (level) and slice-sampling
//! (persistence, vol-of-vol) steps, loadings and factors from conditional
//! Gaussians. Identification: lower-triangular loadings with positive
//! diagonal, enforced by sign flips of factor columns.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::stream_rng;

use super::{ModelKind, PredictiveDraws};

/// Normal-mixture approximation of `log chi^2_1` (10 components):
/// (probability, mean, variance).
const LOG_CHI2_MIX: [(f64, f64, f64); 10] = [
    (0.00609, 1.92677, 0.11265),
    (0.04775, 1.34744, 0.17788),
    (0.13057, 0.73504, 0.26768),
    (0.20674, 0.02266, 0.40611),
    (0.22715, -0.85173, 0.62699),
    (0.18842, -1.97278, 0.98583),
    (0.12047, -3.46788, 1.57469),
    (0.05591, -5.55246, 2.54498),
    (0.01575, -8.68384, 4.16591),
    (0.00115, -14.65000, 7.33342),
];

const LOG_OFFSET: f64 = 1e-12;
const XI_MIN: f64 = -40.0;
const XI_MAX: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct SvPriors {
    /// Normal prior on the log-variance level.
    pub mu_prior_mean: f64,
    pub mu_prior_var: f64,
    /// `(phi + 1)/2 ~ Beta(a, b)`: enforces stationarity.
    pub phi_a: f64,
    pub phi_b: f64,
    /// `sigma^2 ~ Gamma(1/2, rate 1/(2 B_sigma))`.
    pub b_sigma: f64,
    /// Zero-mean Gaussian prior variance on free loadings.
    pub loading_prior_var: f64,
}

impl Default for SvPriors {
    fn default() -> Self {
        Self {
            mu_prior_mean: 0.0,
            mu_prior_var: 100.0,
            phi_a: 20.0,
            phi_b: 1.5,
            b_sigma: 1.0,
            loading_prior_var: 1.0,
        }
    }
}

impl SvPriors {
    /// Prior mean of `(phi + 1)/2`.
    pub fn phi_prior_mean_transformed(&self) -> f64 {
        self.phi_a / (self.phi_a + self.phi_b)
    }
}

#[derive(Debug, Clone)]
pub struct SvMcmcConfig {
    pub burnin: usize,
    pub kept: usize,
    pub thin: usize,
    pub priors: SvPriors,
    /// Desk-scale asset limit; larger panels are rejected.
    pub max_assets: usize,
    /// Minimum fitting-window length.
    pub min_window: usize,
}

impl Default for SvMcmcConfig {
    fn default() -> Self {
        Self {
            burnin: 5_000,
            kept: 5_000,
            thin: 5,
            priors: SvPriors::default(),
            max_assets: 30,
            min_window: 250,
        }
    }
}

/// One stored posterior draw.
#[derive(Debug, Clone)]
pub struct SvDraw {
    /// N x j loadings, lower triangular with positive diagonal.
    pub lambda: DMatrix<f64>,
    /// Per-series AR level, persistence, vol-of-vol (N idiosyncratic then j factor series).
    pub mu: DVector<f64>,
    pub phi: DVector<f64>,
    pub sigma: DVector<f64>,
    /// Latent log-variances at the window end.
    pub xi_last: DVector<f64>,
}

impl SvDraw {
    pub fn n_assets(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.lambda.ncols()
    }
}

/// Univariate slice sampler (stepping out and shrinkage).
fn slice_sample(
    x0: f64,
    logf: impl Fn(f64) -> f64,
    width: f64,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha12Rng,
) -> f64 {
    let f0 = logf(x0);
    if !f0.is_finite() {
        return x0;
    }
    let level = f0 + rng.random::<f64>().ln();
    let u: f64 = rng.random();
    let mut left = (x0 - width * u).max(lo);
    let mut right = (left + width).min(hi);
    for _ in 0..64 {
        if left <= lo || logf(left) < level {
            break;
        }
        left = (left - width).max(lo);
    }
    for _ in 0..64 {
        if right >= hi || logf(right) < level {
            break;
        }
        right = (right + width).min(hi);
    }
    for _ in 0..128 {
        let x1 = left + rng.random::<f64>() * (right - left);
        if logf(x1) >= level {
            return x1;
        }
        if x1 < x0 {
            left = x1;
        } else {
            right = x1;
        }
    }
    x0
}

/// Draws the latent log-variance path of one series given its squared-data
/// observations and AR parameters, via mixture indicators and the
/// tridiagonal precision sampler.
#[allow(clippy::too_many_arguments)]
fn draw_latent_path(
    data: &[f64],
    xi: &mut [f64],
    mu: f64,
    phi: f64,
    sigma: f64,
    rng: &mut ChaCha12Rng,
    z_buf: &mut Vec<f64>,
    comp: &mut Vec<usize>,
) {
    let t_len = data.len();
    z_buf.clear();
    z_buf.extend(data.iter().map(|&y| (y * y + LOG_OFFSET).ln()));

    // Mixture indicators given the current path.
    comp.clear();
    for t in 0..t_len {
        let mut logw = [0.0f64; 10];
        let mut max = f64::NEG_INFINITY;
        for (k, &(q, m, v)) in LOG_CHI2_MIX.iter().enumerate() {
            let d = z_buf[t] - xi[t] - m;
            logw[k] = q.ln() - 0.5 * (v.ln() + d * d / v);
            max = max.max(logw[k]);
        }
        let mut total = 0.0;
        for w in logw.iter_mut() {
            *w = (*w - max).exp();
            total += *w;
        }
        let mut u: f64 = rng.random::<f64>() * total;
        let mut pick = 9usize;
        for (k, w) in logw.iter().enumerate() {
            if u < *w {
                pick = k;
                break;
            }
            u -= *w;
        }
        comp.push(pick);
    }

    // Tridiagonal posterior of the centered path alpha = xi - mu.
    let s2 = sigma * sigma;
    let p0 = (1.0 - phi * phi) / s2;
    let mut diag = vec![0.0f64; t_len];
    let mut off = vec![0.0f64; t_len.saturating_sub(1)];
    let mut rhs = vec![0.0f64; t_len];
    for t in 0..t_len {
        let (_, m, v) = LOG_CHI2_MIX[comp[t]];
        diag[t] += 1.0 / v;
        rhs[t] += (z_buf[t] - m - mu) / v;
    }
    diag[0] += p0;
    for t in 0..t_len - 1 {
        diag[t] += phi * phi / s2;
        diag[t + 1] += 1.0 / s2;
        off[t] = -phi / s2;
    }

    // Cholesky of the tridiagonal precision: L with diag d, sub-diag e.
    let mut d = vec![0.0f64; t_len];
    let mut e = vec![0.0f64; t_len.saturating_sub(1)];
    d[0] = diag[0].sqrt();
    for t in 0..t_len - 1 {
        e[t] = off[t] / d[t];
        d[t + 1] = (diag[t + 1] - e[t] * e[t]).max(1e-300).sqrt();
    }

    // Mean: solve L w = rhs, then L' m = w.
    let mut w = vec![0.0f64; t_len];
    w[0] = rhs[0] / d[0];
    for t in 1..t_len {
        w[t] = (rhs[t] - e[t - 1] * w[t - 1]) / d[t];
    }
    let mut mean = vec![0.0f64; t_len];
    mean[t_len - 1] = w[t_len - 1] / d[t_len - 1];
    for t in (0..t_len - 1).rev() {
        mean[t] = (w[t] - e[t] * mean[t + 1]) / d[t];
    }

    // Sample: alpha = mean + L'^-1 z.
    let mut noise = vec![0.0f64; t_len];
    for item in noise.iter_mut() {
        *item = rng.sample(StandardNormal);
    }
    let mut dev = vec![0.0f64; t_len];
    dev[t_len - 1] = noise[t_len - 1] / d[t_len - 1];
    for t in (0..t_len - 1).rev() {
        dev[t] = (noise[t] - e[t] * dev[t + 1]) / d[t];
    }

    for t in 0..t_len {
        xi[t] = (mu + mean[t] + dev[t]).clamp(XI_MIN, XI_MAX);
    }
}

/// Conditional draws of (mu, phi, sigma) for one latent path.
fn draw_ar_params(
    xi: &[f64],
    mu: &mut f64,
    phi: &mut f64,
    sigma: &mut f64,
    priors: &SvPriors,
    rng: &mut ChaCha12Rng,
) {
    let t_len = xi.len();
    let s2 = *sigma * *sigma;
    let ph = *phi;

    // Level: Gaussian conjugate (stationary initial term included).
    let mut precision = 1.0 / priors.mu_prior_var + (1.0 - ph * ph) / s2;
    let mut num = priors.mu_prior_mean / priors.mu_prior_var + xi[0] * (1.0 - ph * ph) / s2;
    for t in 1..t_len {
        precision += (1.0 - ph) * (1.0 - ph) / s2;
        num += (xi[t] - ph * xi[t - 1]) * (1.0 - ph) / s2;
    }
    let mean = num / precision;
    let z: f64 = rng.sample(StandardNormal);
    *mu = mean + z / precision.sqrt();

    // Persistence: slice sampling under the Beta prior on (phi+1)/2.
    let m = *mu;
    let log_phi = |p: f64| -> f64 {
        if p.abs() >= 1.0 {
            return f64::NEG_INFINITY;
        }
        let mut v = (priors.phi_a - 1.0) * ((1.0 + p) / 2.0).ln()
            + (priors.phi_b - 1.0) * ((1.0 - p) / 2.0).ln();
        v += 0.5 * (1.0 - p * p).ln() - (1.0 - p * p) * (xi[0] - m).powi(2) / (2.0 * s2);
        let mut ss = 0.0;
        for t in 1..t_len {
            let r = xi[t] - m - p * (xi[t - 1] - m);
            ss += r * r;
        }
        v - ss / (2.0 * s2)
    };
    *phi = slice_sample(*phi, log_phi, 0.1, -0.9999, 0.9999, rng);

    // Vol-of-vol: slice sampling on log sigma^2 under the Gamma prior.
    let ph = *phi;
    let mut ss = (1.0 - ph * ph) * (xi[0] - m).powi(2);
    for t in 1..t_len {
        let r = xi[t] - m - ph * (xi[t - 1] - m);
        ss += r * r;
    }
    let rate = 1.0 / (2.0 * priors.b_sigma);
    let log_s2 = |x: f64| -> f64 {
        let v = x.exp();
        // Gamma(1/2, rate) prior on v, Jacobian of the log transform, and
        // the Gaussian likelihood of the path.
        -0.5 * x - v * rate + x + 0.5 * (1.0 - ph * ph).ln() - 0.5 * t_len as f64 * x
            - ss / (2.0 * v)
    };
    let x0 = (s2.max(1e-12)).ln();
    let x1 = slice_sample(x0, log_s2, 0.5, -30.0, 5.0, rng);
    *sigma = (0.5 * x1).exp();
}

struct GibbsState {
    lambda: DMatrix<f64>,
    factors: DMatrix<f64>, // T x j
    xi: DMatrix<f64>,      // T x (N + j)
    mu: DVector<f64>,
    phi: DVector<f64>,
    sigma: DVector<f64>,
}

/// Fits the factor SV model on a window of returns (rows are days).
/// Deterministic per seed. Returns thinned post-burn-in draws.
pub fn factor_sv_fit(
    returns: &DMatrix<f64>,
    n_factors: usize,
    config: &SvMcmcConfig,
    seed: u64,
) -> Result<Vec<SvDraw>> {
    let t_len = returns.nrows();
    let n = returns.ncols();
    if n == 0 {
        return Err(Error::Validation("no assets".into()));
    }
    if n > config.max_assets {
        return Err(Error::Config(format!(
            "{n} assets exceed the desk-scale limit of {}",
            config.max_assets
        )));
    }
    if t_len < config.min_window {
        return Err(Error::InsufficientData(format!(
            "window of {t_len} days below minimum {}",
            config.min_window
        )));
    }
    if n_factors > n {
        return Err(Error::Config(format!(
            "{n_factors} factors exceed {n} assets"
        )));
    }

    let mut rng = stream_rng(seed, 0x7376);
    let priors = &config.priors;

    // Initial state from data scales.
    let mut state = {
        let sd: Vec<f64> = (0..n)
            .map(|i| {
                let col = returns.column(i);
                let mean = col.sum() / t_len as f64;
                let var =
                    col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t_len as f64 - 1.0);
                var.max(1e-12).sqrt()
            })
            .collect();
        let mut lambda = DMatrix::zeros(n, n_factors);
        for (i, sd_i) in sd.iter().enumerate() {
            for l in 0..n_factors.min(i + 1) {
                lambda[(i, l)] = if l == i { 0.5 * sd_i } else { 0.1 * sd_i };
            }
        }
        let mut factors = DMatrix::zeros(t_len, n_factors);
        for l in 0..n_factors {
            for t in 0..t_len {
                factors[(t, l)] = returns[(t, l)] / sd[l];
            }
        }
        let mut xi = DMatrix::zeros(t_len, n + n_factors);
        let mut mu = DVector::zeros(n + n_factors);
        for i in 0..n {
            mu[i] = (sd[i] * sd[i]).ln().clamp(XI_MIN, XI_MAX);
        }
        for l in 0..n_factors {
            mu[n + l] = 0.0;
        }
        for t in 0..t_len {
            for k in 0..n + n_factors {
                xi[(t, k)] = mu[k];
            }
        }
        GibbsState {
            lambda,
            factors,
            xi,
            mu,
            phi: DVector::from_element(n + n_factors, 0.95),
            sigma: DVector::from_element(n + n_factors, 0.2),
        }
    };

    let total = config.burnin + config.kept;
    let mut draws = Vec::new();
    let mut z_buf = Vec::with_capacity(t_len);
    let mut comp = Vec::with_capacity(t_len);
    let mut series_buf = vec![0.0f64; t_len];
    let mut xi_col = vec![0.0f64; t_len];

    for it in 0..total {
        // (a) latent volatilities series by series.
        for k in 0..n + n_factors {
            if k < n {
                for t in 0..t_len {
                    let mut fitted = 0.0;
                    for l in 0..n_factors {
                        fitted += state.lambda[(k, l)] * state.factors[(t, l)];
                    }
                    series_buf[t] = returns[(t, k)] - fitted;
                }
            } else {
                for (t, slot) in series_buf.iter_mut().enumerate() {
                    *slot = state.factors[(t, k - n)];
                }
            }
            for (t, slot) in xi_col.iter_mut().enumerate() {
                *slot = state.xi[(t, k)];
            }
            draw_latent_path(
                &series_buf,
                &mut xi_col,
                state.mu[k],
                state.phi[k],
                state.sigma[k],
                &mut rng,
                &mut z_buf,
                &mut comp,
            );
            for (t, &v) in xi_col.iter().enumerate() {
                state.xi[(t, k)] = v;
            }

            // (b) AR parameters for this series.
            let (mut m, mut p, mut s) = (state.mu[k], state.phi[k], state.sigma[k]);
            draw_ar_params(&xi_col, &mut m, &mut p, &mut s, priors, &mut rng);
            state.mu[k] = m;
            state.phi[k] = p;
            state.sigma[k] = s;
        }

        if n_factors > 0 {
            // (c) loadings row by row under the zero-mean Gaussian prior.
            for i in 0..n {
                let free = n_factors.min(i + 1);
                let mut prec = DMatrix::<f64>::identity(free, free) / priors.loading_prior_var;
                let mut rhs = DVector::<f64>::zeros(free);
                for t in 0..t_len {
                    let w = (-state.xi[(t, i)]).exp();
                    for a in 0..free {
                        let fa = state.factors[(t, a)];
                        rhs[a] += w * fa * returns[(t, i)];
                        for b in 0..free {
                            prec[(a, b)] += w * fa * state.factors[(t, b)];
                        }
                    }
                }
                let chol = prec
                    .cholesky()
                    .ok_or_else(|| Error::Sampler {
                        iteration: it,
                        msg: "loading precision not PD".into(),
                    })?;
                let mean = chol.solve(&rhs);
                let z = DVector::from_iterator(
                    free,
                    (0..free).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                let dev = chol
                    .l()
                    .transpose()
                    .solve_upper_triangular(&z)
                    .ok_or_else(|| Error::Sampler {
                        iteration: it,
                        msg: "singular loading factor".into(),
                    })?;
                for a in 0..free {
                    state.lambda[(i, a)] = mean[a] + dev[a];
                }
                for a in free..n_factors {
                    state.lambda[(i, a)] = 0.0;
                }
            }

            // (d) factors day by day.
            for t in 0..t_len {
                let mut prec = DMatrix::<f64>::zeros(n_factors, n_factors);
                let mut rhs = DVector::<f64>::zeros(n_factors);
                for l in 0..n_factors {
                    prec[(l, l)] += (-state.xi[(t, n + l)]).exp();
                }
                for i in 0..n {
                    let w = (-state.xi[(t, i)]).exp();
                    for a in 0..n_factors {
                        let la = state.lambda[(i, a)];
                        if la == 0.0 {
                            continue;
                        }
                        rhs[a] += w * la * returns[(t, i)];
                        for b in 0..n_factors {
                            prec[(a, b)] += w * la * state.lambda[(i, b)];
                        }
                    }
                }
                let chol = prec.cholesky().ok_or_else(|| Error::Sampler {
                    iteration: it,
                    msg: format!("factor precision not PD at day {t}"),
                })?;
                let mean = chol.solve(&rhs);
                let z = DVector::from_iterator(
                    n_factors,
                    (0..n_factors).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                let dev = chol
                    .l()
                    .transpose()
                    .solve_upper_triangular(&z)
                    .ok_or_else(|| Error::Sampler {
                        iteration: it,
                        msg: "singular factor precision".into(),
                    })?;
                for l in 0..n_factors {
                    state.factors[(t, l)] = mean[l] + dev[l];
                }
            }

            // Identification: positive loading diagonal via sign flips.
            for l in 0..n_factors {
                if state.lambda[(l, l)] < 0.0 {
                    for i in 0..n {
                        state.lambda[(i, l)] = -state.lambda[(i, l)];
                    }
                    for t in 0..t_len {
                        state.factors[(t, l)] = -state.factors[(t, l)];
                    }
                }
            }
        }

        if state.xi.iter().any(|v| !v.is_finite())
            || state.lambda.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Sampler {
                iteration: it,
                msg: "divergent chain: non-finite state".into(),
            });
        }

        if it >= config.burnin && (it - config.burnin).is_multiple_of(config.thin) {
            draws.push(SvDraw {
                lambda: state.lambda.clone(),
                mu: state.mu.clone(),
                phi: state.phi.clone(),
                sigma: state.sigma.clone(),
                xi_last: state.xi.row(t_len - 1).transpose(),
            });
        }
    }

    Ok(draws)
}

/// Propagates one posterior draw a single step and assembles the implied
/// covariance `Lambda V(xi') Lambda' + Q(xi')`.
fn one_step_cov(draw: &SvDraw, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let n = draw.n_assets();
    let j = draw.n_factors();
    let mut xi_next = DVector::zeros(n + j);
    for k in 0..n + j {
        let eta: f64 = rng.sample(StandardNormal);
        xi_next[k] = (draw.mu[k]
            + draw.phi[k] * (draw.xi_last[k] - draw.mu[k])
            + draw.sigma[k] * eta)
            .clamp(XI_MIN, XI_MAX);
    }
    let mut cov = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let mut acc = 0.0;
            for l in 0..j {
                acc += draw.lambda[(a, l)] * draw.lambda[(b, l)] * xi_next[n + l].exp();
            }
            cov[(a, b)] = acc;
        }
        cov[(a, a)] += xi_next[a].exp();
    }
    cov
}

/// One-step-ahead predictive draws: per Monte-Carlo draw, cycle posterior
/// draws, propagate the latent states once, and sample a Gaussian return.
pub fn factor_sv_predict(
    draws: &[SvDraw],
    n_draws: usize,
    seed: u64,
    date: &str,
) -> Result<PredictiveDraws> {
    let first = draws
        .first()
        .ok_or_else(|| Error::InsufficientData("no posterior draws".into()))?;
    let n = first.n_assets();
    let mut rng = stream_rng(seed, 0x7076);
    let mut out = DMatrix::zeros(n_draws, n);
    for row in 0..n_draws {
        let draw = &draws[row % draws.len()];
        let cov = one_step_cov(draw, &mut rng);
        let chol = linalg::chol_lower(&cov)?;
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let r = &chol * z;
        for i in 0..n {
            out[(row, i)] = r[i];
        }
    }
    PredictiveDraws::new(ModelKind::FactorSv, date, out)
}

/// Predictive covariance draws for Rao-Blackwellized density evaluation.
pub fn factor_sv_predictive_covs(
    draws: &[SvDraw],
    count: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    if draws.is_empty() {
        return Err(Error::InsufficientData("no posterior draws".into()));
    }
    let mut rng = stream_rng(seed, 0x7063);
    Ok((0..count)
        .map(|i| one_step_cov(&draws[i % draws.len()], &mut rng))
        .collect())
}
