//! Turnover-penalized allocation: closed-form quadratic-cost solutions,
//! numerical L1-cost solutions with KKT certificates, GMV variants, long-run
//! rebalancing dynamics and Monte-Carlo expected-utility optimization.

mod l1;
mod utility;

pub use l1::{gmv, gmv_with_multiplier, solve_l1, GmvConstraint, L1Solution};
pub use utility::{expected_utility_weights, EuSolverConfig};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::market_data::Weights;

/// Transaction-cost model `nu(w, w+)` for moving from drifted holdings `w+`
/// to `w`. `beta` is a decimal cost level (0.005 = 50bp).
#[derive(Debug, Clone)]
pub enum TxCostModel {
    None,
    /// `beta * ||w - w+||_1`
    L1 { beta: f64 },
    /// `(beta/2) * ||w - w+||_2^2`
    L2 { beta: f64 },
    /// `(w - w+)' B (w - w+)` for PSD `B`.
    QuadraticMatrix { b: DMatrix<f64> },
    /// `(beta/2) * (w - w+)' Sigma (w - w+)`: costs proportional to volatility.
    VolProportional { beta: f64 },
}

impl TxCostModel {
    pub fn beta(&self) -> f64 {
        match self {
            TxCostModel::None => 0.0,
            TxCostModel::L1 { beta }
            | TxCostModel::L2 { beta }
            | TxCostModel::VolProportional { beta } => *beta,
            TxCostModel::QuadraticMatrix { .. } => f64::NAN,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            TxCostModel::None => Ok(()),
            TxCostModel::L1 { beta } | TxCostModel::L2 { beta } | TxCostModel::VolProportional { beta } => {
                if *beta < 0.0 {
                    Err(Error::Validation(format!("beta {beta} must be >= 0")))
                } else {
                    Ok(())
                }
            }
            TxCostModel::QuadraticMatrix { b } => {
                if b.nrows() != n || b.ncols() != n {
                    return Err(Error::Shape(format!(
                        "cost matrix {}x{} for {} assets",
                        b.nrows(),
                        b.ncols(),
                        n
                    )));
                }
                if !linalg::is_symmetric(b, 1e-10 * (1.0 + b.amax())) {
                    return Err(Error::Validation("cost matrix must be symmetric".into()));
                }
                let (vals, _) = linalg::sym_eigen(b);
                if vals.iter().any(|&v| v < -1e-10 * (1.0 + b.amax())) {
                    return Err(Error::Validation("cost matrix must be PSD".into()));
                }
                Ok(())
            }
        }
    }

    /// Realized cost of trading from `drifted` to `target`.
    /// `sigma` is only consulted by [`TxCostModel::VolProportional`].
    pub fn evaluate(
        &self,
        target: &DVector<f64>,
        drifted: &DVector<f64>,
        sigma: Option<&DMatrix<f64>>,
    ) -> Result<f64> {
        let delta = target - drifted;
        Ok(match self {
            TxCostModel::None => 0.0,
            TxCostModel::L1 { beta } => beta * delta.iter().map(|d| d.abs()).sum::<f64>(),
            TxCostModel::L2 { beta } => 0.5 * beta * delta.dot(&delta),
            TxCostModel::QuadraticMatrix { b } => delta.dot(&(b * &delta)),
            TxCostModel::VolProportional { beta } => {
                let sigma = sigma.ok_or_else(|| {
                    Error::Config("volatility-proportional cost needs a covariance".into())
                })?;
                0.5 * beta * delta.dot(&(sigma * &delta))
            }
        })
    }
}

/// One allocation problem instance handed to the solvers.
#[derive(Debug, Clone)]
pub struct AllocationProblem {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub gamma: f64,
    pub omega_plus: Weights,
    pub cost: TxCostModel,
}

impl AllocationProblem {
    pub fn new(
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
        gamma: f64,
        omega_plus: Weights,
        cost: TxCostModel,
    ) -> Result<Self> {
        let n = mu.len();
        if sigma.nrows() != n || sigma.ncols() != n || omega_plus.len() != n {
            return Err(Error::Shape(format!(
                "dimensions disagree: mu {}, sigma {}x{}, omega+ {}",
                n,
                sigma.nrows(),
                sigma.ncols(),
                omega_plus.len()
            )));
        }
        if !(gamma > 0.0) {
            return Err(Error::Validation(format!("gamma {gamma} must be > 0")));
        }
        cost.validate(n)?;
        Ok(Self {
            mu,
            sigma,
            gamma,
            omega_plus,
            cost,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.mu.len()
    }
}

/// Mean-variance efficient weights
/// `w = (1/gamma) A(Sigma) mu + Sigma^-1 1 / (1' Sigma^-1 1)` with
/// `A(Sigma) = Sigma^-1 - Sigma^-1 1 1' Sigma^-1 / (1' Sigma^-1 1)`.
pub fn efficient_weights(mu: &DVector<f64>, sigma: &DMatrix<f64>, gamma: f64) -> Result<Weights> {
    if !(gamma > 0.0) {
        return Err(Error::Validation(format!("gamma {gamma} must be > 0")));
    }
    let n = mu.len();
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::Shape(format!(
            "mu of {} vs sigma {}x{}",
            n,
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let ones = DVector::from_element(n, 1.0);
    let y = linalg::solve_spd(sigma, &ones)?;
    let x = linalg::solve_spd(sigma, mu)?;
    let s = ones.dot(&y);
    if !s.is_finite() || s.abs() < 1e-300 {
        return Err(Error::LinAlg(
            "1' Sigma^-1 1 vanished; consider PSD repair".into(),
        ));
    }
    let a_mu = &x - &y * (ones.dot(&x) / s);
    let w = a_mu / gamma + &y / s;
    Weights::new(normalize_sum(w))
}

/// Global minimum-variance weights `Sigma^-1 1 / (1' Sigma^-1 1)`.
pub fn gmv_unconstrained(sigma: &DMatrix<f64>) -> Result<Weights> {
    let n = sigma.nrows();
    let ones = DVector::from_element(n, 1.0);
    let y = linalg::solve_spd(sigma, &ones)?;
    let s = ones.dot(&y);
    if !s.is_finite() || s.abs() < 1e-300 {
        return Err(Error::LinAlg(
            "1' Sigma^-1 1 vanished; consider PSD repair".into(),
        ));
    }
    Weights::new(normalize_sum(y / s))
}

/// Scrubs the O(eps) float drift off the budget constraint.
fn normalize_sum(mut w: DVector<f64>) -> DVector<f64> {
    let sum: f64 = w.iter().sum();
    if sum != 0.0 && ((sum - 1.0).abs() < 1e-6) {
        w /= sum;
    }
    w
}

/// Quadratic (L2) turnover costs in closed form: the problem collapses to a
/// plain mean-variance program with `Sigma* = Sigma + (beta/gamma) I` and
/// `mu* = mu + beta w+`.
pub fn solve_l2(problem: &AllocationProblem) -> Result<Weights> {
    let beta = match &problem.cost {
        TxCostModel::L2 { beta } => *beta,
        TxCostModel::None => 0.0,
        other => {
            return Err(Error::Config(format!(
                "solve_l2 expects an L2 cost model, got {other:?}"
            )))
        }
    };
    let n = problem.n_assets();
    let mut sigma_star = problem.sigma.clone();
    for i in 0..n {
        sigma_star[(i, i)] += beta / problem.gamma;
    }
    let mu_star = &problem.mu + problem.omega_plus.values() * beta;
    efficient_weights(&mu_star, &sigma_star, problem.gamma)
}

/// Asset-specific quadratic costs `(w - w+)' B (w - w+)`: solved exactly via
/// the bordered stationarity system of the equality-constrained QP.
pub fn solve_quadratic_matrix(problem: &AllocationProblem) -> Result<Weights> {
    let b = match &problem.cost {
        TxCostModel::QuadraticMatrix { b } => b.clone(),
        TxCostModel::None => DMatrix::zeros(problem.n_assets(), problem.n_assets()),
        other => {
            return Err(Error::Config(format!(
                "solve_quadratic_matrix expects a quadratic-matrix cost, got {other:?}"
            )))
        }
    };
    let m = &problem.sigma * problem.gamma + &b * 2.0;
    let rhs = &problem.mu + (&b * problem.omega_plus.values()) * 2.0;
    let (w, _) = linalg::bordered_solve(&m, &rhs)?;
    Weights::new(normalize_sum(w))
}

/// Volatility-proportional costs `(beta/2) d' Sigma d`: optimal weights are
/// the efficient portfolio at risk aversion `gamma + beta` plus a
/// `beta/(beta+gamma)` tilt along `(w+ - w_mvp)`.
pub fn solve_vol_proportional(problem: &AllocationProblem) -> Result<Weights> {
    let beta = match &problem.cost {
        TxCostModel::VolProportional { beta } => *beta,
        TxCostModel::None => 0.0,
        other => {
            return Err(Error::Config(format!(
                "solve_vol_proportional expects a volatility-proportional cost, got {other:?}"
            )))
        }
    };
    let w_eff = efficient_weights(&problem.mu, &problem.sigma, problem.gamma + beta)?;
    let w_mvp = gmv_unconstrained(&problem.sigma)?;
    let tilt = (problem.omega_plus.values() - w_mvp.values()) * (beta / (beta + problem.gamma));
    Weights::new(normalize_sum(w_eff.values() + tilt))
}

/// Proposition-5 equivalent covariance for converged L1 problems:
/// `Sigma + (beta/gamma)(g 1' + 1 g')`.
pub fn sigma_l1_equivalent(
    sigma: &DMatrix<f64>,
    beta: f64,
    gamma: f64,
    subgradient: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    if sigma.ncols() != n || subgradient.len() != n {
        return Err(Error::Shape(format!(
            "sigma {}x{} vs subgradient {}",
            sigma.nrows(),
            sigma.ncols(),
            subgradient.len()
        )));
    }
    let ones = DVector::from_element(n, 1.0);
    let outer = subgradient * ones.transpose() + ones * subgradient.transpose();
    Ok(sigma + outer * (beta / gamma))
}

/// Repeated L2 rebalancing from `w0` with no return drift: the pure dynamics
/// `w_{t+1} = solve_l2(mu, Sigma, gamma, beta, w_t)`. Returns `w_1 ..= w_T`.
pub fn long_run_iterate(
    w0: &Weights,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    gamma: f64,
    beta: f64,
    horizon: usize,
) -> Result<Vec<Weights>> {
    let mut out = Vec::with_capacity(horizon);
    let mut current = w0.clone();
    for _ in 0..horizon {
        let problem = AllocationProblem::new(
            mu.clone(),
            sigma.clone(),
            gamma,
            current.clone(),
            TxCostModel::L2 { beta },
        )?;
        current = solve_l2(&problem)?;
        out.push(current.clone());
    }
    Ok(out)
}

/// Critical turnover-cost threshold: the largest `beta` such that
/// `||(beta/gamma) A(Sigma + (beta/gamma) I)||_F < 1`, found by bisection.
/// Returns `+inf` when the condition holds up to the `1e12` cap.
pub fn beta_star(sigma: &DMatrix<f64>, gamma: f64, tol: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::Validation(format!("gamma {gamma} must be > 0")));
    }
    let cap = 1e12;
    let f = |beta: f64| -> Result<f64> {
        let n = sigma.nrows();
        let mut sigma_star = sigma.clone();
        for i in 0..n {
            sigma_star[(i, i)] += beta / gamma;
        }
        let inv = sigma_star
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::LinAlg("Sigma* not invertible".into()))?;
        let ones = DVector::from_element(n, 1.0);
        let y = &inv * &ones;
        let s = ones.dot(&y);
        let a = &inv - (&y * y.transpose()) / s;
        Ok((a * (beta / gamma)).norm())
    };

    if f(cap)? < 1.0 {
        return Ok(f64::INFINITY);
    }
    let (mut lo, mut hi) = (0.0f64, cap);
    while hi - lo > tol * (1.0 + lo) {
        let mid = 0.5 * (lo + hi);
        if f(mid)? < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if !mid.is_finite() {
            return Err(Error::Domain("beta bisection overflowed".into()));
        }
    }
    Ok(0.5 * (lo + hi))
}
