//! Proportional (L1) turnover costs and constrained minimum-variance
//! problems, solved by accelerated proximal gradient steps.
//!
//! The penalty-plus-budget prox is computed exactly: for
//! `min_u 0.5||u - v||^2 + k||u||_1 s.t. 1'u = c` the solution is
//! `soft(v - theta, k)` with `theta` the root of a monotone piecewise-linear
//! scalar equation, found by bisection to machine precision. Each prox step
//! therefore lands exactly on the budget hyperplane.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::market_data::Weights;

use super::{AllocationProblem, TxCostModel};

/// Converged L1 allocation with its stationarity certificate.
#[derive(Debug, Clone)]
pub struct L1Solution {
    pub weights: Weights,
    /// Subgradient of the L1 term at the optimum; entries in `[-1, 1]`,
    /// equal to `sign(delta_i)` wherever the trade is non-zero.
    pub subgradient: DVector<f64>,
    pub kkt_residual: f64,
    /// Budget-constraint multiplier.
    pub lagrange_mult: f64,
    pub iterations: usize,
    /// True when a `1e-10` ridge was added to a singular covariance.
    pub ridge_applied: bool,
}

fn soft(v: f64, k: f64) -> f64 {
    if v > k {
        v - k
    } else if v < -k {
        v + k
    } else {
        0.0
    }
}

/// Exact prox of `k||.||_1` restricted to the hyperplane `1'u = c`.
fn prox_l1_hyperplane(v: &DVector<f64>, k: f64, c: f64) -> DVector<f64> {
    let n = v.len();
    let sum_soft = |theta: f64| -> f64 { v.iter().map(|&vi| soft(vi - theta, k)).sum() };

    let vmin = v.min();
    let vmax = v.max();
    let slack = k + (c.abs() + 1.0) / n as f64 + 1.0;
    let mut lo = vmin - slack; // sum_soft(lo) >= c
    let mut hi = vmax + slack; // sum_soft(hi) <= c
    let mut theta = 0.5 * (lo + hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        theta = mid;
        let s = sum_soft(mid);
        // The equation is piecewise linear with flat stretches; stop inside
        // a flat stretch instead of drifting to its edge.
        if s == c {
            break;
        }
        if s > c {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * (1.0 + lo.abs().max(hi.abs())) {
            theta = 0.5 * (lo + hi);
            break;
        }
    }
    let mut u = DVector::from_iterator(n, v.iter().map(|&vi| soft(vi - theta, k)));
    // Absorb the last eps of infeasibility into the largest component.
    let err = c - u.iter().sum::<f64>();
    if err != 0.0 {
        let mut idx = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, &ui) in u.iter().enumerate() {
            if ui.abs() > best {
                best = ui.abs();
                idx = i;
            }
        }
        u[idx] += err;
    }
    u
}

/// Stationarity certificate for `min (gamma/2) w'Sw - w'mu + beta||w - a||_1`
/// on the budget hyperplane: finds the multiplier and subgradient that come
/// closest to satisfying `gamma S w - mu + beta g - lambda 1 = 0`.
fn extract_certificate(
    sigma: &DMatrix<f64>,
    mu: &DVector<f64>,
    gamma: f64,
    beta: f64,
    w: &DVector<f64>,
    delta: &DVector<f64>,
    active_tol: f64,
) -> (DVector<f64>, f64, f64) {
    let n = w.len();
    let c = sigma * w * gamma - mu;

    let lambda = if beta == 0.0 {
        c.iter().sum::<f64>() / n as f64
    } else {
        let active: Vec<usize> = (0..n).filter(|&i| delta[i].abs() > active_tol).collect();
        if active.is_empty() {
            let lo = (0..n).map(|i| c[i] - beta).fold(f64::NEG_INFINITY, f64::max);
            let hi = (0..n).map(|i| c[i] + beta).fold(f64::INFINITY, f64::min);
            0.5 * (lo + hi)
        } else {
            active
                .iter()
                .map(|&i| c[i] + beta * delta[i].signum())
                .sum::<f64>()
                / active.len() as f64
        }
    };

    let g = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            if beta == 0.0 {
                0.0
            } else if delta[i].abs() > active_tol {
                delta[i].signum()
            } else {
                ((lambda - c[i]) / beta).clamp(-1.0, 1.0)
            }
        }),
    );

    let mut residual = 0.0f64;
    for i in 0..n {
        residual = residual.max((c[i] + beta * g[i] - lambda).abs());
    }
    (g, lambda, residual)
}

/// Minimizes `(gamma/2) w' Sigma w - w'mu + beta ||w - w+||_1` over the
/// budget hyperplane by FISTA on the trade vector, with the exact hyperplane
/// prox and a KKT certificate at exit.
pub fn solve_l1(problem: &AllocationProblem, tol: f64, max_iter: usize) -> Result<L1Solution> {
    let beta = match &problem.cost {
        TxCostModel::L1 { beta } => *beta,
        TxCostModel::None => 0.0,
        other => {
            return Err(Error::Config(format!(
                "solve_l1 expects an L1 cost model, got {other:?}"
            )))
        }
    };
    if !(tol > 0.0) {
        return Err(Error::Validation(format!("tol {tol} must be > 0")));
    }
    let n = problem.n_assets();
    let a = problem.omega_plus.values();
    let gamma = problem.gamma;

    // Ridge fallback for singular Sigma: deterministic tie-breaking.
    let (vals, _) = linalg::sym_eigen(&problem.sigma);
    let lam_max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lam_min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut sigma = problem.sigma.clone();
    let mut ridge_applied = false;
    if lam_min <= 1e-12 * lam_max.max(1e-300) || lam_max <= 0.0 {
        let ridge = 1e-10 * lam_max.max(1.0);
        for i in 0..n {
            sigma[(i, i)] += ridge;
        }
        ridge_applied = true;
    }
    let lam_max = lam_max.max(1e-10);
    let step = 1.0 / (gamma * lam_max);

    let grad = |delta: &DVector<f64>| -> DVector<f64> { (&sigma * (a + delta)) * gamma - &problem.mu };

    let mut delta = DVector::<f64>::zeros(n);
    let mut delta_prev = delta.clone();
    let mut y = delta.clone();
    let mut t_k = 1.0f64;

    let objective = |d: &DVector<f64>| -> f64 {
        let w = a + d;
        0.5 * gamma * w.dot(&(&sigma * &w)) - w.dot(&problem.mu)
            + beta * d.iter().map(|x| x.abs()).sum::<f64>()
    };
    let mut obj_prev = objective(&delta);

    let mut iterations = 0usize;
    let mut best: Option<(f64, DVector<f64>, DVector<f64>, f64)> = None;

    while iterations < max_iter {
        iterations += 1;
        let g = grad(&y);
        let next = prox_l1_hyperplane(&(&y - &g * step), beta * step, 0.0);

        let change = (&next - &delta).amax();
        delta_prev.copy_from(&delta);
        delta = next;

        // Adaptive restart keeps FISTA monotone.
        let obj = objective(&delta);
        if obj > obj_prev {
            t_k = 1.0;
            y.copy_from(&delta);
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
            y = &delta + (&delta - &delta_prev) * ((t_k - 1.0) / t_next);
            t_k = t_next;
        }
        obj_prev = obj;

        if change <= tol || iterations == max_iter {
            let w = a + &delta;
            let (g_star, lambda, residual) =
                extract_certificate(&sigma, &problem.mu, gamma, beta, &w, &delta, tol);
            if residual <= tol {
                let weights = Weights::new(w)?;
                return Ok(L1Solution {
                    weights,
                    subgradient: g_star,
                    kkt_residual: residual,
                    lagrange_mult: lambda,
                    iterations,
                    ridge_applied,
                });
            }
            match &best {
                Some((r, ..)) if *r <= residual => {}
                _ => best = Some((residual, w, g_star, lambda)),
            }
        }
    }

    let (residual, w, ..) = best.unwrap_or_else(|| {
        let w = a + &delta;
        let (g_star, lambda, residual) =
            extract_certificate(&sigma, &problem.mu, gamma, beta, &w, &delta, tol);
        (residual, w, g_star, lambda)
    });
    Err(Error::Iteration {
        iterations,
        residual,
        best: w.iter().cloned().collect(),
    })
}

/// Constraint set for global minimum-variance problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GmvConstraint {
    Unconstrained,
    NoShort,
    /// `||w||_1 <= theta` with `theta >= 1`.
    GrossExposure(f64),
}

/// Minimizes `w' Sigma w` subject to `1'w = 1` plus the selected constraint.
pub fn gmv(sigma: &DMatrix<f64>, constraint: GmvConstraint) -> Result<Weights> {
    gmv_with_multiplier(sigma, constraint).map(|(w, _)| w)
}

/// As [`gmv`]; for the gross-exposure constraint also returns the penalty
/// multiplier at which the L1 budget binds (`None` if slack).
pub fn gmv_with_multiplier(
    sigma: &DMatrix<f64>,
    constraint: GmvConstraint,
) -> Result<(Weights, Option<f64>)> {
    match constraint {
        GmvConstraint::Unconstrained => Ok((super::gmv_unconstrained(sigma)?, None)),
        GmvConstraint::NoShort => Ok((gmv_no_short(sigma)?, None)),
        GmvConstraint::GrossExposure(theta) => {
            if theta < 1.0 {
                return Err(Error::Validation(format!(
                    "gross exposure bound {theta} must be >= 1"
                )));
            }
            gmv_gross_exposure(sigma, theta)
        }
    }
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    let mut u: Vec<f64> = v.iter().cloned().collect();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite weights"));
    let mut css = 0.0;
    let mut tau = 0.0;
    let mut rho = 0;
    for (j, &uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
            rho = j + 1;
        }
    }
    debug_assert!(rho > 0);
    DVector::from_iterator(n, v.iter().map(|&vi| (vi - tau).max(0.0)))
}

const GMV_TOL: f64 = 1e-10;
const GMV_MAX_ITER: usize = 200_000;

fn gmv_no_short(sigma: &DMatrix<f64>) -> Result<Weights> {
    let n = sigma.nrows();
    let lam_max = linalg::max_eigenvalue(sigma).max(1e-12);
    let step = 0.5 / lam_max;

    let mut w = DVector::from_element(n, 1.0 / n as f64);
    let mut w_prev = w.clone();
    let mut y = w.clone();
    let mut t_k = 1.0f64;
    let mut obj_prev = w.dot(&(sigma * &w));

    for iter in 1..=GMV_MAX_ITER {
        let g = (sigma * &y) * 2.0;
        let next = project_simplex(&(&y - &g * step));
        w_prev.copy_from(&w);
        w = next;

        let obj = w.dot(&(sigma * &w));
        if obj > obj_prev {
            t_k = 1.0;
            y.copy_from(&w);
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
            y = &w + (&w - &w_prev) * ((t_k - 1.0) / t_next);
            t_k = t_next;
        }
        obj_prev = obj;

        if iter % 16 == 0 || (&w - &w_prev).amax() < GMV_TOL {
            // Simplex KKT: on the support the gradient is flat at lambda;
            // off the support it is >= lambda.
            let grad = (sigma * &w) * 2.0;
            let support: Vec<usize> = (0..n).filter(|&i| w[i] > 1e-12).collect();
            let lambda =
                support.iter().map(|&i| grad[i]).sum::<f64>() / support.len().max(1) as f64;
            let mut res = 0.0f64;
            for i in 0..n {
                if w[i] > 1e-12 {
                    res = res.max((grad[i] - lambda).abs());
                } else {
                    res = res.max((lambda - grad[i]).max(0.0));
                }
            }
            if res <= 1e-8 * (1.0 + lambda.abs()) {
                return Weights::new(w);
            }
        }
    }
    Err(Error::Iteration {
        iterations: GMV_MAX_ITER,
        residual: (&w - &w_prev).amax(),
        best: w.iter().cloned().collect(),
    })
}

/// Inner problem of the gross-exposure solver:
/// `min w'Sw + pen ||w||_1 s.t. 1'w = 1`.
fn gmv_l1_penalized(sigma: &DMatrix<f64>, pen: f64) -> Result<DVector<f64>> {
    let n = sigma.nrows();
    let lam_max = linalg::max_eigenvalue(sigma).max(1e-12);
    let step = 0.5 / lam_max;

    let mut w = DVector::from_element(n, 1.0 / n as f64);
    let mut w_prev = w.clone();
    let mut y = w.clone();
    let mut t_k = 1.0f64;
    let objective = |w: &DVector<f64>| -> f64 {
        w.dot(&(sigma * w)) + pen * w.iter().map(|x| x.abs()).sum::<f64>()
    };
    let mut obj_prev = objective(&w);

    for _ in 1..=GMV_MAX_ITER {
        let g = (sigma * &y) * 2.0;
        let next = prox_l1_hyperplane(&(&y - &g * step), pen * step, 1.0);
        w_prev.copy_from(&w);
        w = next;

        let obj = objective(&w);
        if obj > obj_prev {
            t_k = 1.0;
            y.copy_from(&w);
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
            y = &w + (&w - &w_prev) * ((t_k - 1.0) / t_next);
            t_k = t_next;
        }
        obj_prev = obj;

        if (&w - &w_prev).amax() < GMV_TOL {
            return Ok(w);
        }
    }
    Err(Error::Iteration {
        iterations: GMV_MAX_ITER,
        residual: (&w - &w_prev).amax(),
        best: w.iter().cloned().collect(),
    })
}

fn gmv_gross_exposure(sigma: &DMatrix<f64>, theta: f64) -> Result<(Weights, Option<f64>)> {
    // Penalty route: ||w(pen)||_1 is non-increasing in pen, so bisect the
    // smallest penalty at which the budget holds.
    let w0 = gmv_l1_penalized(sigma, 0.0)?;
    if w0.iter().map(|x| x.abs()).sum::<f64>() <= theta + 1e-10 {
        return Ok((Weights::new(w0)?, None));
    }

    let mut hi = 1e-6 * linalg::max_eigenvalue(sigma).max(1e-12);
    let mut lo = 0.0;
    for _ in 0..200 {
        let w = gmv_l1_penalized(sigma, hi)?;
        if w.iter().map(|x| x.abs()).sum::<f64>() <= theta {
            break;
        }
        lo = hi;
        hi *= 4.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let w = gmv_l1_penalized(sigma, mid)?;
        if w.iter().map(|x| x.abs()).sum::<f64>() <= theta {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + hi) {
            break;
        }
    }
    let w = gmv_l1_penalized(sigma, hi)?;
    Ok((Weights::new(w)?, Some(hi)))
}
