//! Optimal prediction pooling: combine per-model predictive densities into a
//! time-varying mixture by rolling-window log-score maximization on the
//! simplex.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::predictive::{ModelKind, PredictiveDraws};
use crate::rng::stream_rng;

/// Per-day per-model log predictive densities.
#[derive(Debug, Clone)]
pub struct ScorePanel {
    dates: Vec<String>,
    models: Vec<ModelKind>,
    /// T x K log densities.
    log_scores: DMatrix<f64>,
}

impl ScorePanel {
    pub fn new(dates: Vec<String>, models: Vec<ModelKind>, log_scores: DMatrix<f64>) -> Result<Self> {
        if log_scores.nrows() != dates.len() || log_scores.ncols() != models.len() {
            return Err(Error::Shape(format!(
                "{}x{} scores vs {} dates x {} models",
                log_scores.nrows(),
                log_scores.ncols(),
                dates.len(),
                models.len()
            )));
        }
        if log_scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(
                "non-finite log density in score panel".into(),
            ));
        }
        Ok(Self {
            dates,
            models,
            log_scores,
        })
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn models(&self) -> &[ModelKind] {
        &self.models
    }

    pub fn log_scores(&self) -> &DMatrix<f64> {
        &self.log_scores
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }
}

/// Mixture weights on the unit simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolWeights(DVector<f64>);

impl PoolWeights {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("empty pool weights".into()));
        }
        if values.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
            return Err(Error::Validation("pool weights must be >= 0".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::Validation(format!(
                "pool weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(k: usize) -> Self {
        Self(DVector::from_element(k, 1.0 / k as f64))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }
}

const POOL_KKT_TOL: f64 = 1e-8;
const POOL_MAX_ITER: usize = 10_000;

/// Maximizes the window-summed log score of the mixture over the simplex:
/// `sum_{i=t-h_c}^{t} log(sum_k c_k p_{i,k})`, a concave program solved by
/// exponentiated-gradient ascent with an Armijo line search from the uniform
/// start. Day `t` itself is part of the window.
pub fn optimal_pool(panel: &ScorePanel, t: usize, window: usize) -> Result<PoolWeights> {
    let k = panel.n_models();
    if k == 0 {
        return Err(Error::Validation("no models to pool".into()));
    }
    if t >= panel.dates.len() || t < window {
        return Err(Error::Range(format!(
            "pooling window of {window} days ending at {t} exceeds history"
        )));
    }
    let rows = t - window..=t;
    // Shift each day by its max log score so the mixture density never
    // underflows; the shift only adds a constant to the objective.
    let mut shifted: Vec<DVector<f64>> = Vec::new();
    for i in rows {
        let row = panel.log_scores.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        shifted.push(DVector::from_iterator(k, row.iter().map(|&v| (v - m).exp())));
    }
    if k == 1 {
        return PoolWeights::new(DVector::from_element(1, 1.0));
    }

    let objective = |c: &DVector<f64>| -> f64 {
        shifted.iter().map(|p| c.dot(p).ln()).sum::<f64>()
    };
    let gradient = |c: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(k);
        for p in &shifted {
            let mix = c.dot(p);
            g += p / mix;
        }
        g
    };
    // Simplex KKT residual for a maximization: on the support the gradient
    // equals its weighted mean, off the support it cannot exceed it.
    let kkt_residual = |c: &DVector<f64>, g: &DVector<f64>| -> f64 {
        let nu = c.dot(g);
        let mut res = 0.0f64;
        for i in 0..k {
            res = res.max(c[i] * (g[i] - nu).abs());
            res = res.max(g[i] - nu);
        }
        res / shifted.len() as f64 // per-day scale
    };

    let mut c = DVector::from_element(k, 1.0 / k as f64);
    let mut value = objective(&c);
    let mut step = 1.0f64;
    for _ in 0..POOL_MAX_ITER {
        let g = gradient(&c);
        if kkt_residual(&c, &g) <= POOL_KKT_TOL {
            return PoolWeights::new(c);
        }
        // Exponentiated-gradient trial steps with halving.
        let nu = c.dot(&g);
        let mut s = step;
        let mut advanced = false;
        for _ in 0..60 {
            let mut cand = DVector::zeros(k);
            let mut max_arg = f64::NEG_INFINITY;
            for i in 0..k {
                let a = s * (g[i] - nu);
                cand[i] = a;
                max_arg = max_arg.max(a);
            }
            let mut total = 0.0;
            for i in 0..k {
                cand[i] = c[i] * (cand[i] - max_arg).exp();
                total += cand[i];
            }
            cand /= total;
            let v = objective(&cand);
            if v.is_finite() && v > value {
                c = cand;
                value = v;
                step = (s * 2.0).min(1e4);
                advanced = true;
                break;
            }
            s *= 0.5;
        }
        if !advanced {
            let g = gradient(&c);
            return PoolWeights::new(c).and_then(|w| {
                if kkt_residual(w.values(), &g) <= POOL_KKT_TOL * 10.0 {
                    Ok(w)
                } else {
                    Err(Error::Iteration {
                        iterations: POOL_MAX_ITER,
                        residual: kkt_residual(w.values(), &g),
                        best: w.values().iter().cloned().collect(),
                    })
                }
            });
        }
    }
    let g = gradient(&c);
    let res = kkt_residual(&c, &g);
    if res <= POOL_KKT_TOL {
        PoolWeights::new(c)
    } else {
        Err(Error::Iteration {
            iterations: POOL_MAX_ITER,
            residual: res,
            best: c.iter().cloned().collect(),
        })
    }
}

/// Log score of the mixture at given per-model log densities:
/// `log(sum_k c_k p_k)` via log-sum-exp.
pub fn mixture_log_score(weights: &PoolWeights, log_densities: &DVector<f64>) -> Result<f64> {
    let k = weights.values().len();
    if log_densities.len() != k {
        return Err(Error::Shape(format!(
            "{} weights vs {} densities",
            k,
            log_densities.len()
        )));
    }
    let m = log_densities
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for i in 0..k {
        total += weights.values()[i] * (log_densities[i] - m).exp();
    }
    Ok(m + total.ln())
}

/// Draws from the mixture: sample a model index from the pool weights, then
/// a row (with replacement) from that model's draw set. Deterministic per
/// seed.
pub fn mixture_predict(
    components: &[&PredictiveDraws],
    weights: &PoolWeights,
    n_draws: usize,
    seed: u64,
    date: &str,
) -> Result<PredictiveDraws> {
    if components.is_empty() {
        return Err(Error::Validation("no mixture components".into()));
    }
    if components.len() != weights.values().len() {
        return Err(Error::Shape(format!(
            "{} components vs {} weights",
            components.len(),
            weights.values().len()
        )));
    }
    let n = components[0].n_assets();
    for c in components {
        if c.n_assets() != n {
            return Err(Error::Shape(
                "mixture components disagree on asset count".into(),
            ));
        }
    }
    let mut rng = stream_rng(seed, 0x6d69);
    let mut out = DMatrix::zeros(n_draws, n);
    for row in 0..n_draws {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = components.len() - 1;
        for (i, &w) in weights.values().iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let source = components[pick];
        let idx = rng.random_range(0..source.n_draws());
        for i in 0..n {
            out[(row, i)] = source.draws()[(idx, i)];
        }
    }
    PredictiveDraws::new(ModelKind::Mixture, date, out)
}
