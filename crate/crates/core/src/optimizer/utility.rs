//! Monte-Carlo expected-utility optimization over predictive draws.
//!
//! Maximizes `(1/J) sum_j U((1 + w'r_j) - 1 - nu(w))` over the budget
//! hyperplane, with the constraint eliminated by substituting the last
//! weight. Utilities are averaged with a fixed pairwise-summation tree, so
//! results are bit-identical for any thread count.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;
use crate::market_data::Weights;

use super::TxCostModel;

#[derive(Debug, Clone)]
pub struct EuSolverConfig {
    /// Stationarity tolerance on directional derivatives.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EuSolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 2_000,
        }
    }
}

/// Power utility shifted to be continuous in gamma at 1:
/// `((1+x)^(1-gamma) - 1) / (1-gamma)`, log at the boundary. The shift does
/// not move the argmax.
fn utility(x: f64, gamma: f64) -> f64 {
    if (gamma - 1.0).abs() < 1e-9 {
        x.ln_1p()
    } else {
        ((1.0 + x).powf(1.0 - gamma) - 1.0) / (1.0 - gamma)
    }
}

fn utility_prime(x: f64, gamma: f64) -> f64 {
    (1.0 + x).powf(-gamma)
}

struct EuObjective<'a> {
    draws: &'a DMatrix<f64>,
    gamma: f64,
    omega_plus: DVector<f64>,
    cost: TxCostModel,
    draw_cov: Option<DMatrix<f64>>,
}

const CHUNK: usize = 8_192;

impl<'a> EuObjective<'a> {
    /// Expected utility at `w`; `-inf` when any draw ruins the portfolio.
    fn value(&self, w: &DVector<f64>) -> Result<f64> {
        let nu = self
            .cost
            .evaluate(w, &self.omega_plus, self.draw_cov.as_ref())?;
        let port = self.draws * w;
        let j = port.len();
        let gamma = self.gamma;

        let ranges: Vec<(usize, usize)> = (0..j)
            .step_by(CHUNK)
            .map(|s| (s, (s + CHUNK).min(j)))
            .collect();
        let port_ref = &port;
        let chunks = exec::par_map(ranges, move |(s, e)| {
            let mut vals = Vec::with_capacity(e - s);
            for idx in s..e {
                let x = port_ref[idx] - nu;
                if 1.0 + x <= 0.0 {
                    return None;
                }
                vals.push(utility(x, gamma));
            }
            Some(vals)
        });
        let mut utils = Vec::with_capacity(j);
        for c in chunks {
            match c {
                Some(mut v) => utils.append(&mut v),
                None => return Ok(f64::NEG_INFINITY),
            }
        }
        Ok(exec::pairwise_sum(&utils) / j as f64)
    }

    /// Gradient in full weight space; at L1 kinks the zero subgradient of
    /// the cost term is used (the compass polish handles the kink itself).
    fn gradient(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let n = w.len();
        let nu = self
            .cost
            .evaluate(w, &self.omega_plus, self.draw_cov.as_ref())?;
        let port = self.draws * w;
        let j = port.len();
        let gamma = self.gamma;

        let mut weights_u = DVector::zeros(j);
        for idx in 0..j {
            let x = port[idx] - nu;
            if 1.0 + x <= 0.0 {
                return Err(Error::Domain("gradient at ruined portfolio".into()));
            }
            weights_u[idx] = utility_prime(x, gamma);
        }
        let mean_uprime = weights_u.sum() / j as f64;
        let grad_port = self.draws.transpose() * &weights_u / j as f64;

        let dnu: DVector<f64> = match &self.cost {
            TxCostModel::None => DVector::zeros(n),
            TxCostModel::L1 { beta } => DVector::from_iterator(
                n,
                (0..n).map(|i| {
                    let d = w[i] - self.omega_plus[i];
                    if d == 0.0 {
                        0.0
                    } else {
                        beta * d.signum()
                    }
                }),
            ),
            TxCostModel::L2 { beta } => (w - &self.omega_plus) * *beta,
            TxCostModel::QuadraticMatrix { b } => (b * (w - &self.omega_plus)) * 2.0,
            TxCostModel::VolProportional { beta } => {
                let sigma = self.draw_cov.as_ref().expect("set for vol-proportional");
                (sigma * (w - &self.omega_plus)) * *beta
            }
        };
        Ok(grad_port - dnu * mean_uprime)
    }

    /// Hessian of the smooth part `(1/J) sum_j U(w'r_j - nu(w))`, treating
    /// the cost gradient as locally constant (exact for None and L1 away
    /// from kinks, a Gauss-Newton-style approximation otherwise).
    fn hessian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = w.len();
        let nu = self
            .cost
            .evaluate(w, &self.omega_plus, self.draw_cov.as_ref())?;
        let port = self.draws * w;
        let j = port.len();
        let gamma = self.gamma;

        let mut h = DMatrix::zeros(n, n);
        for idx in 0..j {
            let x = port[idx] - nu;
            if 1.0 + x <= 0.0 {
                return Err(Error::Domain("hessian at ruined portfolio".into()));
            }
            let u2 = -gamma * (1.0 + x).powf(-gamma - 1.0);
            let r = self.draws.row(idx);
            for a in 0..n {
                for b in 0..n {
                    h[(a, b)] += u2 * r[a] * r[b];
                }
            }
        }
        Ok(h / j as f64)
    }
}

fn reduced(full: &DVector<f64>) -> DVector<f64> {
    let n = full.len();
    DVector::from_iterator(n - 1, (0..n - 1).map(|i| full[i] - full[n - 1]))
}

fn expand(theta: &DVector<f64>) -> DVector<f64> {
    let n = theta.len() + 1;
    let mut w = DVector::zeros(n);
    let mut sum = 0.0;
    for i in 0..n - 1 {
        w[i] = theta[i];
        sum += theta[i];
    }
    w[n - 1] = 1.0 - sum;
    w
}

fn optimize_from(
    objective: &EuObjective<'_>,
    start: &DVector<f64>,
    config: &EuSolverConfig,
) -> Result<(DVector<f64>, f64, f64)> {
    let n = start.len();
    if n == 1 {
        // Full investment is forced; nothing to optimize.
        let w = DVector::from_element(1, 1.0);
        let val = objective.value(&w)?;
        return Ok((w, val, 0.0));
    }
    let mut theta = DVector::from_iterator(n - 1, start.iter().take(n - 1).cloned());
    let mut value = objective.value(&expand(&theta))?;
    if value == f64::NEG_INFINITY {
        return Err(Error::Infeasible(
            "starting portfolio is ruined on some draw".into(),
        ));
    }

    let mut step = 1.0f64;
    let probe = 1e-7;
    let mut residual = f64::INFINITY;

    let has_kinks = matches!(objective.cost, TxCostModel::L1 { beta } if beta > 0.0);

    for _ in 0..config.max_iter {
        let w = expand(&theta);
        let d = reduced(&objective.gradient(&w)?);

        // Newton direction on the reduced space, gradient fallback when the
        // Hessian is not usable.
        let mut advanced = false;
        if d.amax() > config.tol {
            let h = objective.hessian(&w)?;
            let m = theta.len();
            let h_red = DMatrix::from_fn(m, m, |a, b| {
                h[(a, b)] - h[(a, m)] - h[(m, b)] + h[(m, m)]
            });
            let dir = (-h_red)
                .lu()
                .solve(&d)
                .filter(|p| p.dot(&d) > 0.0 && p.iter().all(|x| x.is_finite()))
                .unwrap_or_else(|| d.clone());

            let slope = dir.dot(&d);
            let mut s = step;
            for _ in 0..60 {
                let cand = &theta + &dir * s;
                let v = objective.value(&expand(&cand))?;
                // Strict improvement, so underflowed thresholds cannot let
                // zero-movement steps pass as progress.
                if v.is_finite() && v > value && v >= value + 1e-4 * s * slope {
                    theta = cand;
                    value = v;
                    step = (s * 2.0).min(4.0);
                    advanced = true;
                    break;
                }
                s *= 0.5;
            }
        } else if !has_kinks {
            return Ok((expand(&theta), value, d.amax()));
        }

        if !advanced {
            // Kink-aware stationarity: one-sided directional derivatives
            // along every coordinate of the reduced space.
            residual = 0.0f64;
            let mut best_dir: Option<(usize, f64, f64)> = None;
            for i in 0..n - 1 {
                for sgn in [1.0, -1.0] {
                    let mut cand = theta.clone();
                    cand[i] += sgn * probe;
                    let v = objective.value(&expand(&cand))?;
                    let dd = (v - value) / probe;
                    if dd > residual {
                        residual = dd;
                        best_dir = Some((i, sgn, v));
                    }
                }
            }
            if residual <= config.tol {
                return Ok((expand(&theta), value, residual));
            }
            // Compass step along the best ascent coordinate.
            let (i, sgn, _) = best_dir.expect("residual > tol implies a direction");
            let mut s = step.max(probe * 10.0);
            let mut moved = false;
            for _ in 0..80 {
                let mut cand = theta.clone();
                cand[i] += sgn * s;
                let v = objective.value(&expand(&cand))?;
                if v.is_finite() && v > value {
                    theta = cand;
                    value = v;
                    moved = true;
                    break;
                }
                s *= 0.5;
            }
            if !moved {
                // No improvement at probe scale either; accept as stationary.
                return Ok((expand(&theta), value, residual));
            }
            step = s;
        }
    }

    let w = expand(&theta);
    Err(Error::Iteration {
        iterations: config.max_iter,
        residual,
        best: w.iter().cloned().collect(),
    })
}

/// Maximizes Monte-Carlo expected power utility net of transaction costs
/// over fully invested portfolios. Deterministic given the draws: two starts
/// (current drifted holdings and the GMV of the draw covariance) are run and
/// the better local optimum is kept.
pub fn expected_utility_weights(
    draws: &DMatrix<f64>,
    gamma: f64,
    omega_plus: &Weights,
    cost: &TxCostModel,
    config: &EuSolverConfig,
) -> Result<Weights> {
    let n = draws.ncols();
    if n == 0 || draws.nrows() == 0 {
        return Err(Error::Validation("empty draw matrix".into()));
    }
    if omega_plus.len() != n {
        return Err(Error::Shape(format!(
            "omega+ of {} vs {} assets in draws",
            omega_plus.len(),
            n
        )));
    }
    if !(gamma > 0.0) {
        return Err(Error::Validation(format!("gamma {gamma} must be > 0")));
    }
    cost.validate(n)?;

    let needs_cov = matches!(cost, TxCostModel::VolProportional { .. });
    let draw_cov = if needs_cov || n > 1 {
        Some(draw_covariance(draws))
    } else {
        None
    };

    let objective = EuObjective {
        draws,
        gamma,
        omega_plus: omega_plus.values().clone(),
        cost: cost.clone(),
        draw_cov: draw_cov.clone(),
    };

    let mut starts: Vec<DVector<f64>> = vec![omega_plus.values().clone()];
    if let Some(cov) = &draw_cov {
        match super::gmv_unconstrained(cov) {
            Ok(g) => starts.push(g.into_vector()),
            Err(_) => starts.push(DVector::from_element(n, 1.0 / n as f64)),
        }
    }

    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut last_err: Option<Error> = None;
    for start in &starts {
        match optimize_from(&objective, start, config) {
            Ok((w, v, _)) => match &best {
                Some((_, bv)) if *bv >= v => {}
                _ => best = Some((w, v)),
            },
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((w, _)) => {
            // Scrub rounding drift off the budget before constructing Weights.
            let sum: f64 = w.iter().sum();
            Weights::new(w / sum)
        }
        None => Err(last_err.unwrap_or_else(|| {
            Error::Infeasible("every start is ruined on some draw".into())
        })),
    }
}

/// Sample covariance of the draw matrix with a tiny deterministic ridge.
fn draw_covariance(draws: &DMatrix<f64>) -> DMatrix<f64> {
    let j = draws.nrows();
    let n = draws.ncols();
    let mean = draws.row_mean();
    let centered = draws - DMatrix::from_rows(&vec![mean.clone(); j]);
    let mut cov = centered.transpose() * centered / (j.max(2) as f64 - 1.0);
    let scale = cov.diagonal().amax().max(1e-12);
    for i in 0..n {
        cov[(i, i)] += 1e-10 * scale;
    }
    linalg::symmetrize(&cov)
}
