//! Daily covariance estimators: rolling sample covariance, Ledoit-Wolf
//! constant-correlation shrinkage, and blocked realized kernels from
//! refresh-time-synchronized tick data, with smoothing and PSD repair.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;
use crate::market_data::{refresh_time_sample, ReturnPanel, SyncedReturns, TickSeries};

/// Relative eigenvalue floor used by PSD repair.
pub const PSD_CLIP_REL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Sample,
    LedoitWolf,
    Brk,
    BrkSmoothed,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EstimatorKind::Sample => "sample",
            EstimatorKind::LedoitWolf => "lw",
            EstimatorKind::Brk => "brk",
            EstimatorKind::BrkSmoothed => "brk_smoothed",
        };
        f.write_str(s)
    }
}

/// Symmetric covariance matrix plus estimator metadata.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    matrix: DMatrix<f64>,
    pub estimator: EstimatorKind,
    pub date: String,
    pub condition_number: f64,
}

impl CovarianceEstimate {
    pub fn new(matrix: DMatrix<f64>, estimator: EstimatorKind, date: impl Into<String>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Shape(format!(
                "covariance must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if !linalg::is_symmetric(&matrix, 1e-12 * (1.0 + matrix.amax())) {
            return Err(Error::Validation("covariance not symmetric".into()));
        }
        let condition_number = linalg::condition_number(&matrix);
        Ok(Self {
            matrix,
            estimator,
            date: date.into(),
            condition_number,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n_assets(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Rolling sample covariance over the `h` observations ending at day `t`,
/// normalized by `h - 1` around the window mean.
pub fn sample_cov(panel: &ReturnPanel, t: usize, h: usize) -> Result<CovarianceEstimate> {
    let window = panel.window(t, h)?;
    let s = sample_cov_matrix(&window);
    CovarianceEstimate::new(s, EstimatorKind::Sample, panel.dates()[t].clone())
}

fn sample_cov_matrix(window: &DMatrix<f64>) -> DMatrix<f64> {
    let h = window.nrows();
    let mean = window.row_mean();
    let centered = window - DMatrix::from_rows(&vec![mean.clone(); h]);
    linalg::symmetrize(&(centered.transpose() * &centered / (h as f64 - 1.0)))
}

/// Ledoit-Wolf shrinkage towards the sample constant-correlation target:
/// `delta * F + (1 - delta) * S` with the shrinkage intensity estimated from
/// the window.
pub fn lw_shrinkage(panel: &ReturnPanel, t: usize, h: usize) -> Result<CovarianceEstimate> {
    let (estimate, _) = lw_shrinkage_with_intensity(panel, t, h)?;
    Ok(estimate)
}

/// As [`lw_shrinkage`] but also returns `(delta, raw_delta)`; the raw value
/// is the unclamped estimate.
pub fn lw_shrinkage_with_intensity(
    panel: &ReturnPanel,
    t: usize,
    h: usize,
) -> Result<(CovarianceEstimate, (f64, f64))> {
    if panel.n_assets() < 2 {
        return Err(Error::Degenerate(
            "shrinkage needs at least 2 assets".into(),
        ));
    }
    let window = panel.window(t, h)?;
    let n = window.ncols();
    let s = sample_cov_matrix(&window);

    let s_max = (0..n).map(|i| s[(i, i)]).fold(0.0f64, f64::max);
    for i in 0..n {
        if s[(i, i)] <= 1e-12 * s_max || s_max <= 0.0 {
            return Err(Error::Degenerate(format!(
                "zero-variance asset {} in window",
                panel.assets()[i]
            )));
        }
    }

    let sd: Vec<f64> = (0..n).map(|i| s[(i, i)].sqrt()).collect();
    let mut rho_sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            rho_sum += s[(i, j)] / (sd[i] * sd[j]);
        }
    }
    let rho_bar = 2.0 * rho_sum / ((n * (n - 1)) as f64);

    let mut target = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            target[(i, j)] = if i == j {
                s[(i, i)]
            } else {
                rho_bar * sd[i] * sd[j]
            };
        }
    }

    // Shrinkage intensity of the 2004 constant-correlation estimator.
    let hf = window.nrows() as f64;
    let mean = window.row_mean();
    let x = &window - DMatrix::from_rows(&vec![mean.clone(); window.nrows()]);

    let mut pi_hat = 0.0;
    let mut pi_diag = 0.0;
    let mut rho_off = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut pi_ij = 0.0;
            for t_ in 0..window.nrows() {
                let d = x[(t_, i)] * x[(t_, j)] - s[(i, j)];
                pi_ij += d * d;
            }
            pi_ij /= hf;
            pi_hat += pi_ij;
            if i == j {
                pi_diag += pi_ij;
            } else {
                let mut theta_ii = 0.0;
                let mut theta_jj = 0.0;
                for t_ in 0..window.nrows() {
                    let dij = x[(t_, i)] * x[(t_, j)] - s[(i, j)];
                    theta_ii += (x[(t_, i)] * x[(t_, i)] - s[(i, i)]) * dij;
                    theta_jj += (x[(t_, j)] * x[(t_, j)] - s[(j, j)]) * dij;
                }
                theta_ii /= hf;
                theta_jj /= hf;
                rho_off += 0.5 * rho_bar * ((sd[j] / sd[i]) * theta_ii + (sd[i] / sd[j]) * theta_jj);
            }
        }
    }
    let rho_hat = pi_diag + rho_off;
    let gamma_hat = (&target - &s).map(|v| v * v).sum();

    let raw = if gamma_hat > 0.0 {
        ((pi_hat - rho_hat) / gamma_hat) / hf
    } else {
        0.0
    };
    let delta = raw.clamp(0.0, 1.0);

    let sigma = linalg::symmetrize(&(&target * delta + &s * (1.0 - delta)));
    let estimate =
        CovarianceEstimate::new(sigma, EstimatorKind::LedoitWolf, panel.dates()[t].clone())?;
    Ok((estimate, (delta, raw)))
}

/// Parzen weight: `1 - 6x^2 + 6x^3` on `[0, 1/2]`, `2(1-x)^3` on `(1/2, 1]`,
/// zero beyond.
pub fn parzen(x: f64) -> f64 {
    let x = x.abs();
    if x <= 0.5 {
        1.0 - 6.0 * x * x + 6.0 * x * x * x
    } else if x <= 1.0 {
        2.0 * (1.0 - x).powi(3)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// `L = ceil(c * n^(3/5))` with `c = 3.51 * xi^(4/5)` and
    /// `xi^2 = noise variance / sqrt(quarticity proxy)`, capped at `n - 2`.
    Automatic,
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
    /// Days averaged by [`smooth_and_repair`].
    pub smoothing_window: usize,
    /// Minimum synchronized returns per block before a block is usable.
    pub min_block_returns: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Automatic,
            smoothing_window: 5,
            min_block_returns: 2,
        }
    }
}

/// Noise variance estimate: half the mean squared tick-by-tick log return.
fn tick_noise_variance(ticks: &TickSeries) -> f64 {
    let n = ticks.len() - 1;
    let sum: f64 = ticks
        .midquotes()
        .windows(2)
        .map(|w| (w[1] / w[0]).ln().powi(2))
        .sum();
    0.5 * sum / n as f64
}

/// Bandwidth for one block: per-asset `xi` from its own tick noise and the
/// synchronized realized variance, averaged across block assets.
fn automatic_bandwidth(sync: &SyncedReturns, ticks: &[&TickSeries]) -> Result<usize> {
    let n = sync.n_returns();
    let mut c_sum = 0.0;
    for (i, ts) in ticks.iter().enumerate() {
        let rv: f64 = sync.log_returns().column(i).map(|r| r * r).sum();
        if rv <= 0.0 {
            return Err(Error::Degenerate(format!(
                "asset {} has zero synchronized variance",
                ts.asset()
            )));
        }
        let xi2 = tick_noise_variance(ts) / rv;
        let xi = xi2.max(0.0).sqrt();
        c_sum += 3.51 * xi.powf(0.8);
    }
    let c = c_sum / ticks.len() as f64;
    let l = (c * (n as f64).powf(0.6)).ceil() as usize;
    Ok(l.min(n.saturating_sub(2)))
}

/// Multivariate realized kernel on one synchronized block:
/// `K = sum_{|h| <= L} parzen(|h|/(L+1)) Gamma_h` with non-demeaned
/// auto-covariance outer products. Returns `(K, L, n_sync)`.
pub fn realized_kernel_block(
    sync: &SyncedReturns,
    ticks: &[&TickSeries],
    config: &KernelConfig,
) -> Result<(DMatrix<f64>, usize, usize)> {
    let n = sync.n_returns();
    let l = match config.bandwidth {
        Bandwidth::Fixed(l) => l,
        Bandwidth::Automatic => automatic_bandwidth(sync, ticks)?,
    };
    if n < (l + 2).max(config.min_block_returns) {
        return Err(Error::InsufficientData(format!(
            "block {}: {} synchronized returns, need at least {}",
            sync.block_id,
            n,
            (l + 2).max(config.min_block_returns)
        )));
    }

    let r = sync.log_returns();
    let k_assets = r.ncols();
    let mut k = DMatrix::<f64>::zeros(k_assets, k_assets);

    // Lag-0 term.
    let gamma0 = r.transpose() * r;
    k += &gamma0;

    for h in 1..=l {
        let w = parzen(h as f64 / (l as f64 + 1.0));
        if w == 0.0 {
            continue;
        }
        // Gamma_h = sum_{l > h} r_l r_{l-h}'
        let lead = r.rows(h, n - h);
        let lag = r.rows(0, n - h);
        let gamma_h = lead.transpose() * lag;
        k += (&gamma_h + gamma_h.transpose()) * w;
    }

    Ok((linalg::symmetrize(&k), l, n))
}

/// Asset groups for blocked estimation. Groups partition the asset universe
/// with sizes differing by at most one.
#[derive(Debug, Clone)]
pub struct BlockPartition {
    groups: Vec<Vec<usize>>,
    n_assets: usize,
}

impl BlockPartition {
    pub fn new(groups: Vec<Vec<usize>>, n_assets: usize) -> Result<Self> {
        let mut seen = vec![false; n_assets];
        for g in &groups {
            for &i in g {
                if i >= n_assets {
                    return Err(Error::Validation(format!("asset index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Validation(format!("asset {i} in two groups")));
                }
                seen[i] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Validation("groups do not cover all assets".into()));
        }
        let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
        let (min, max) = (
            sizes.iter().min().copied().unwrap_or(0),
            sizes.iter().max().copied().unwrap_or(0),
        );
        if min == 0 || max - min > 1 {
            return Err(Error::Validation(
                "group sizes must differ by at most 1".into(),
            ));
        }
        Ok(Self { groups, n_assets })
    }

    /// Splits assets sorted by quote count (most liquid first) into
    /// `n_groups` near-equal groups.
    pub fn by_liquidity(ticks: &[TickSeries], n_groups: usize) -> Result<Self> {
        let n = ticks.len();
        if n == 0 {
            return Err(Error::Validation("no assets".into()));
        }
        let n_groups = n_groups.clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| std::cmp::Reverse((ticks[i].len(), std::cmp::Reverse(i))));

        let base = n / n_groups;
        let extra = n % n_groups;
        let mut groups = Vec::with_capacity(n_groups);
        let mut start = 0;
        for g in 0..n_groups {
            let size = base + usize::from(g < extra);
            groups.push(order[start..start + size].to_vec());
            start += size;
        }
        Self::new(groups, n)
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Within-group and cross-group blocks, each as a sorted asset-id list
    /// plus the `(g1, g2)` pair it fills.
    pub fn blocks(&self) -> Vec<(usize, usize, Vec<usize>)> {
        let g = self.groups.len();
        let mut out = Vec::new();
        for a in 0..g {
            for b in a..g {
                let mut assets = self.groups[a].clone();
                if b != a {
                    assets.extend_from_slice(&self.groups[b]);
                }
                assets.sort_unstable();
                out.push((a, b, assets));
            }
        }
        out
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }
}

struct BlockCorrelation {
    g1: usize,
    g2: usize,
    assets: Vec<usize>,
    corr: DMatrix<f64>,
    n_sync: usize,
}

/// Blocked realized kernel covariance of one day: per-block correlations are
/// stacked into a full correlation matrix (blocks with larger synchronized
/// samples overwrite overlapping entries), the diagonal comes from univariate
/// realized kernels, and the result is clipped to PSD.
pub fn brk_covariance(
    ticks: &[TickSeries],
    partition: &BlockPartition,
    config: &KernelConfig,
    date: &str,
) -> Result<CovarianceEstimate> {
    let n = ticks.len();
    if n == 0 {
        return Err(Error::InsufficientData("no tick series".into()));
    }
    if partition.n_assets() != n {
        return Err(Error::Shape(format!(
            "partition over {} assets, got {} tick series",
            partition.n_assets(),
            n
        )));
    }

    // Per-block correlation matrices, in parallel.
    let blocks = partition.blocks();
    let block_results: Vec<BlockCorrelation> = exec::try_par_map(blocks, |(g1, g2, assets)| {
        let series: Vec<&TickSeries> = assets.iter().map(|&i| &ticks[i]).collect();
        let sync = refresh_time_sample(g1 * partition.groups().len() + g2, &series)?;
        let (k, _, n_sync) = realized_kernel_block(&sync, &series, config)?;
        let m = k.nrows();
        let mut v = DVector::zeros(m);
        for i in 0..m {
            if k[(i, i)] <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "block ({g1},{g2}): asset {} has non-positive kernel variance",
                    ticks[assets[i]].asset()
                )));
            }
            v[i] = k[(i, i)].sqrt();
        }
        let mut corr = k;
        for i in 0..m {
            for j in 0..m {
                corr[(i, j)] /= v[i] * v[j];
            }
        }
        Ok(BlockCorrelation {
            g1,
            g2,
            assets,
            corr,
            n_sync,
        })
    })?;

    // Stack: ascending synchronized-sample size, so larger samples win ties.
    let mut order: Vec<usize> = (0..block_results.len()).collect();
    order.sort_by_key(|&i| (block_results[i].n_sync, std::cmp::Reverse(i)));

    let group_of = {
        let mut map = vec![0usize; n];
        for (g, ids) in partition.groups().iter().enumerate() {
            for &i in ids {
                map[i] = g;
            }
        }
        map
    };

    let mut h = DMatrix::<f64>::identity(n, n);
    for &bi in &order {
        let b = &block_results[bi];
        for (bi_row, &ai) in b.assets.iter().enumerate() {
            for (bi_col, &aj) in b.assets.iter().enumerate() {
                if ai == aj {
                    continue;
                }
                let (gi, gj) = (group_of[ai], group_of[aj]);
                let within = b.g1 == b.g2 && gi == b.g1 && gj == b.g1;
                let cross = b.g1 != b.g2
                    && ((gi == b.g1 && gj == b.g2) || (gi == b.g2 && gj == b.g1));
                if within || cross {
                    h[(ai, aj)] = b.corr[(bi_row, bi_col)];
                }
            }
        }
    }

    // Diagonal variances from univariate realized kernels.
    let variances: Vec<f64> = exec::try_par_map((0..n).collect(), |i| {
        let ts = &ticks[i];
        let sync = refresh_time_sample(i, &[ts])?;
        let (k, _, _) = realized_kernel_block(&sync, &[ts], config)?;
        if k[(0, 0)] <= 0.0 {
            return Err(Error::Degenerate(format!(
                "asset {} has non-positive univariate kernel variance",
                ts.asset()
            )));
        }
        Ok(k[(0, 0)])
    })?;

    // PSD repair on the stacked correlation, then restore the unit diagonal.
    let mut h = linalg::spectral_clip(&h, PSD_CLIP_REL_EPS);
    let d: Vec<f64> = (0..n).map(|i| h[(i, i)].sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] /= d[i] * d[j];
        }
    }

    let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    let mut sigma = h;
    for i in 0..n {
        for j in 0..n {
            sigma[(i, j)] *= sd[i] * sd[j];
        }
    }

    CovarianceEstimate::new(linalg::symmetrize(&sigma), EstimatorKind::Brk, date)
}

/// Plain realized covariance on refresh-time synchronized returns over all
/// assets as one block: the no-kernel benchmark.
pub fn naive_realized_cov(ticks: &[TickSeries]) -> Result<DMatrix<f64>> {
    let series: Vec<&TickSeries> = ticks.iter().collect();
    let sync = refresh_time_sample(0, &series)?;
    let r = sync.log_returns();
    Ok(linalg::symmetrize(&(r.transpose() * r)))
}

/// Elementwise average of the given estimates (callers pass the last `w`
/// days, or fewer near the sample start) followed by spectral clipping.
pub fn smooth_and_repair(estimates: &[CovarianceEstimate]) -> Result<CovarianceEstimate> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::InsufficientData("no estimates to smooth".into()))?;
    let n = first.n_assets();
    let mut mean = DMatrix::<f64>::zeros(n, n);
    for e in estimates {
        if e.n_assets() != n {
            return Err(Error::Shape(format!(
                "smoothing mixes {}x{} with {}x{}",
                n,
                n,
                e.n_assets(),
                e.n_assets()
            )));
        }
        mean += e.matrix();
    }
    mean /= estimates.len() as f64;
    let repaired = linalg::spectral_clip(&mean, PSD_CLIP_REL_EPS);
    CovarianceEstimate::new(
        repaired,
        EstimatorKind::BrkSmoothed,
        estimates.last().expect("non-empty").date.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{simulate_market, NoiseConfig, SimConfig};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn panel_from(returns: DMatrix<f64>) -> ReturnPanel {
        let t = returns.nrows();
        let n = returns.ncols();
        let dates = (0..t)
            .map(|d| crate::market_data::date_from_epoch_day(18_262 + d as i64))
            .collect();
        let assets = (0..n).map(|i| format!("A{:03}", i)).collect();
        ReturnPanel::new(dates, assets, returns).unwrap()
    }

    fn seeded_panel(seed: u64, t: usize, n: usize) -> ReturnPanel {
        let mut rng = crate::rng::stream_rng(seed, 0);
        let m = DMatrix::from_fn(t, n, |_, _| {
            0.01 * rng.sample::<f64, _>(StandardNormal)
        });
        panel_from(m)
    }

    #[test]
    fn sample_cov_constant_returns_is_zero() {
        let panel = panel_from(DMatrix::from_element(5, 3, 0.004));
        let est = sample_cov(&panel, 4, 5).unwrap();
        assert!(est.matrix().amax() < 1e-18);
    }

    #[test]
    fn sample_cov_two_point_window() {
        let m = DMatrix::from_row_slice(2, 2, &[0.01, 0.01, -0.01, -0.01]);
        let panel = panel_from(m);
        let est = sample_cov(&panel, 1, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(est.matrix()[(i, j)], 2e-4, epsilon = 1e-18);
            }
        }
    }

    #[test]
    fn sample_cov_scalar_matches_textbook_variance() {
        let mut rng = crate::rng::stream_rng(3, 0);
        let xs: Vec<f64> = (0..40).map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal)).collect();
        let panel = panel_from(DMatrix::from_column_slice(40, 1, &xs));
        let est = sample_cov(&panel, 39, 40).unwrap();

        let mean: f64 = xs.iter().sum::<f64>() / 40.0;
        let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 39.0;
        assert_relative_eq!(est.matrix()[(0, 0)], var, epsilon = 1e-16);
    }

    #[test]
    fn sample_cov_window_out_of_range() {
        let panel = seeded_panel(1, 10, 2);
        assert!(matches!(
            sample_cov(&panel, 3, 5),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn sample_cov_is_permutation_equivariant() {
        let panel = seeded_panel(9, 30, 4);
        let est = sample_cov(&panel, 29, 30).unwrap();

        let perm = [2usize, 0, 3, 1];
        let permuted = panel.select_assets(&perm).unwrap();
        let est_p = sample_cov(&permuted, 29, 30).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_relative_eq!(
                    est_p.matrix()[(i, j)],
                    est.matrix()[(perm[i], perm[j])],
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn lw_identity_when_target_equals_sample() {
        // With two assets the constant-correlation target always equals the
        // sample covariance, so shrinkage must return S exactly.
        let panel = seeded_panel(4, 25, 2);
        let s = sample_cov(&panel, 24, 25).unwrap();
        let lw = lw_shrinkage(&panel, 24, 25).unwrap();
        assert_relative_eq!((lw.matrix() - s.matrix()).amax(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lw_delta_is_clamped_and_raw_escapes_bounds_sometimes() {
        let mut saw_outside = false;
        for seed in 0..60 {
            let panel = seeded_panel(seed, 4, 5);
            match lw_shrinkage_with_intensity(&panel, 3, 4) {
                Ok((_, (delta, raw))) => {
                    assert!((0.0..=1.0).contains(&delta));
                    if !(0.0..=1.0).contains(&raw) {
                        saw_outside = true;
                    }
                }
                Err(Error::Degenerate(_)) => {}
                Err(e) => panic!("unexpected {e:?}"),
            }
        }
        assert!(saw_outside, "raw intensity never left [0,1] in 60 seeds");
    }

    #[test]
    fn lw_zero_variance_asset_is_degenerate() {
        let mut m = DMatrix::from_element(10, 3, 0.0);
        for t in 0..10 {
            m[(t, 0)] = 0.01 * (t as f64 - 4.5);
            m[(t, 1)] = -0.01 * (t as f64 - 4.5);
            m[(t, 2)] = 0.005; // constant
        }
        let panel = panel_from(m);
        assert!(matches!(
            lw_shrinkage(&panel, 9, 10),
            Err(Error::Degenerate(_))
        ));
    }

    /// Literal transcription of the constant-correlation shrinkage formulas,
    /// kept scalar and index-by-index as an independent oracle.
    #[allow(clippy::needless_range_loop)]
    fn lw_oracle(window: &DMatrix<f64>) -> DMatrix<f64> {
        let t = window.nrows();
        let n = window.ncols();
        let tf = t as f64;

        let mut mean = vec![0.0; n];
        for i in 0..n {
            for row in 0..t {
                mean[i] += window[(row, i)];
            }
            mean[i] /= tf;
        }
        let mut x = vec![vec![0.0; n]; t];
        for row in 0..t {
            for i in 0..n {
                x[row][i] = window[(row, i)] - mean[i];
            }
        }
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for row in 0..t {
                    acc += x[row][i] * x[row][j];
                }
                s[i][j] = acc / (tf - 1.0);
            }
        }
        let mut rho_bar = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                rho_bar += s[i][j] / (s[i][i].sqrt() * s[j][j].sqrt());
            }
        }
        rho_bar *= 2.0 / ((n * (n - 1)) as f64);

        let mut f = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                f[i][j] = if i == j {
                    s[i][i]
                } else {
                    rho_bar * s[i][i].sqrt() * s[j][j].sqrt()
                };
            }
        }

        let mut pi_hat = 0.0;
        let mut pi_diag = 0.0;
        let mut rho_off = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut pi_ij = 0.0;
                for row in 0..t {
                    let d = x[row][i] * x[row][j] - s[i][j];
                    pi_ij += d * d;
                }
                pi_ij /= tf;
                pi_hat += pi_ij;
                if i == j {
                    pi_diag += pi_ij;
                } else {
                    let mut th_ii = 0.0;
                    let mut th_jj = 0.0;
                    for row in 0..t {
                        let dij = x[row][i] * x[row][j] - s[i][j];
                        th_ii += (x[row][i] * x[row][i] - s[i][i]) * dij;
                        th_jj += (x[row][j] * x[row][j] - s[j][j]) * dij;
                    }
                    th_ii /= tf;
                    th_jj /= tf;
                    rho_off += 0.5
                        * rho_bar
                        * ((s[j][j] / s[i][i]).sqrt() * th_ii + (s[i][i] / s[j][j]).sqrt() * th_jj);
                }
            }
        }
        let rho_hat = pi_diag + rho_off;
        let mut gamma_hat = 0.0;
        for i in 0..n {
            for j in 0..n {
                gamma_hat += (f[i][j] - s[i][j]).powi(2);
            }
        }
        let raw = if gamma_hat > 0.0 {
            ((pi_hat - rho_hat) / gamma_hat) / tf
        } else {
            0.0
        };
        let delta = raw.clamp(0.0, 1.0);

        DMatrix::from_fn(n, n, |i, j| delta * f[i][j] + (1.0 - delta) * s[i][j])
    }

    #[test]
    fn lw_matches_independent_transcription() {
        let panel = seeded_panel(77, 60, 5);
        let lw = lw_shrinkage(&panel, 59, 60).unwrap();
        let oracle = lw_oracle(&panel.window(59, 60).unwrap());
        assert!((lw.matrix() - oracle).amax() < 1e-10);
    }

    #[test]
    fn lw_improves_conditioning_in_undersampled_regime() {
        let n = 5;
        for seed in 0..20 {
            let h = 6 + (seed % 4) as usize; // h < 2N = 10
            let panel = seeded_panel(100 + seed, h, n);
            let t = h - 1;
            let s = sample_cov(&panel, t, h).unwrap();
            let lw = lw_shrinkage(&panel, t, h).unwrap();
            assert!(
                lw.condition_number <= s.condition_number * (1.0 + 1e-9),
                "seed {seed}: {} > {}",
                lw.condition_number,
                s.condition_number
            );
        }
    }

    #[test]
    fn parzen_known_values() {
        assert_relative_eq!(parzen(0.0), 1.0, epsilon = 1e-15);
        assert_relative_eq!(parzen(0.5), 0.25, epsilon = 1e-15);
        assert_relative_eq!(parzen(1.0), 0.0, epsilon = 1e-15);
        assert_relative_eq!(parzen(2.0), 0.0, epsilon = 1e-15);
    }

    fn synced_walk(seed: u64, steps: usize, assets: usize) -> (Vec<TickSeries>, DMatrix<f64>) {
        let mut rng = crate::rng::stream_rng(seed, 1);
        let times: Vec<i64> = (0..steps as i64).map(|k| 1_000_000 * (k + 1)).collect();
        let mut series = Vec::new();
        let mut rets = DMatrix::zeros(steps - 1, assets);
        for a in 0..assets {
            let mut quotes = vec![100.0 + a as f64];
            for s in 1..steps {
                let r: f64 = 1e-3 * rng.sample::<f64, _>(StandardNormal);
                let q = quotes[s - 1] * r.exp();
                rets[(s - 1, a)] = r;
                quotes.push(q);
            }
            series.push(TickSeries::new(format!("A{:03}", a), times.clone(), quotes).unwrap());
        }
        (series, rets)
    }

    #[test]
    fn kernel_l0_equals_outer_product_sum() {
        let (series, rets) = synced_walk(5, 30, 2);
        let refs: Vec<&TickSeries> = series.iter().collect();
        let sync = refresh_time_sample(0, &refs).unwrap();
        let config = KernelConfig {
            bandwidth: Bandwidth::Fixed(0),
            ..KernelConfig::default()
        };
        let (k, l, _) = realized_kernel_block(&sync, &refs, &config).unwrap();
        assert_eq!(l, 0);
        let synced = sync.log_returns();
        let expected = synced.transpose() * synced;
        assert!((&k - expected).amax() == 0.0);
        // Quote reconstruction round-trips the generating returns.
        let from_rets = rets.transpose() * &rets;
        assert!((&k - from_rets).amax() < 1e-15);
    }

    #[test]
    fn kernel_insufficient_returns_for_bandwidth() {
        let (series, _) = synced_walk(6, 4, 2);
        let refs: Vec<&TickSeries> = series.iter().collect();
        let sync = refresh_time_sample(0, &refs).unwrap();
        let config = KernelConfig {
            bandwidth: Bandwidth::Fixed(5),
            ..KernelConfig::default()
        };
        assert!(matches!(
            realized_kernel_block(&sync, &refs, &config),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn brk_single_group_has_no_stacking_artifacts() {
        let (series, _) = synced_walk(8, 200, 3);
        let partition = BlockPartition::new(vec![vec![0, 1, 2]], 3).unwrap();
        let config = KernelConfig {
            bandwidth: Bandwidth::Fixed(2),
            ..KernelConfig::default()
        };
        let est = brk_covariance(&series, &partition, &config, "2020-01-01").unwrap();

        // Correlation of the single block must match the output correlation.
        let refs: Vec<&TickSeries> = series.iter().collect();
        let sync = refresh_time_sample(0, &refs).unwrap();
        let (k, _, _) = realized_kernel_block(&sync, &refs, &config).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let corr_block = k[(i, j)] / (k[(i, i)] * k[(j, j)]).sqrt();
                let m = est.matrix();
                let corr_out = m[(i, j)] / (m[(i, i)] * m[(j, j)]).sqrt();
                assert_relative_eq!(corr_out, corr_block, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn brk_constant_midquote_is_degenerate() {
        let times: Vec<i64> = (1..50).map(|k| k * 1_000_000).collect();
        let flat = TickSeries::new("FLAT", times.clone(), vec![100.0; 49]).unwrap();
        let (mut series, _) = synced_walk(9, 49, 1);
        series.push(flat);
        let partition = BlockPartition::new(vec![vec![0, 1]], 2).unwrap();
        let config = KernelConfig {
            bandwidth: Bandwidth::Fixed(0),
            ..KernelConfig::default()
        };
        let err = brk_covariance(&series, &partition, &config, "2020-01-01").unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)), "{err:?}");
    }

    #[test]
    fn brk_beats_naive_realized_cov_under_noise() {
        let config = SimConfig {
            n_assets: 4,
            n_days: 8,
            tick_intensity: 0.5,
            noise: NoiseConfig { variance: 1e-6 },
            ..SimConfig::default()
        };
        let sim = simulate_market(&config, 21).unwrap();
        let partition = BlockPartition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let kcfg = KernelConfig::default();

        let mut err_brk = 0.0;
        let mut err_naive = 0.0;
        for (d, day) in sim.ticks.iter().enumerate() {
            let truth = &sim.sigma_true[d];
            let brk = brk_covariance(&day.series, &partition, &kcfg, &day.date).unwrap();
            let naive = naive_realized_cov(&day.series).unwrap();
            err_brk += (brk.matrix() - truth).norm().powi(2);
            err_naive += (&naive - truth).norm().powi(2);
        }
        assert!(
            err_brk < err_naive,
            "brk {} vs naive {}",
            err_brk.sqrt(),
            err_naive.sqrt()
        );
    }

    #[test]
    fn smoothing_is_identity_for_single_psd_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        let est = CovarianceEstimate::new(m.clone(), EstimatorKind::Brk, "d").unwrap();
        let out = smooth_and_repair(&[est]).unwrap();
        assert!((out.matrix() - &m).amax() < 1e-12);
    }

    #[test]
    fn smoothing_averages_elementwise() {
        let a = CovarianceEstimate::new(DMatrix::identity(3, 3), EstimatorKind::Brk, "d1").unwrap();
        let b =
            CovarianceEstimate::new(DMatrix::identity(3, 3) * 3.0, EstimatorKind::Brk, "d2").unwrap();
        let out = smooth_and_repair(&[a, b]).unwrap();
        assert!((out.matrix() - DMatrix::identity(3, 3) * 2.0).amax() < 1e-12);
    }

    #[test]
    fn smoothing_rejects_dimension_mismatch() {
        let a = CovarianceEstimate::new(DMatrix::identity(2, 2), EstimatorKind::Brk, "d1").unwrap();
        let b = CovarianceEstimate::new(DMatrix::identity(3, 3), EstimatorKind::Brk, "d2").unwrap();
        assert!(matches!(
            smooth_and_repair(&[a, b]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn smoothing_repairs_negative_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.05, 1.05, 1.0]);
        let est = CovarianceEstimate::new(m, EstimatorKind::Brk, "d").unwrap();
        let out = smooth_and_repair(&[est]).unwrap();
        let (vals, _) = linalg::sym_eigen(out.matrix());
        assert!(vals.iter().all(|&v| v >= -1e-10));
    }

    #[test]
    fn estimators_return_symmetric_matrices() {
        let panel = seeded_panel(13, 40, 4);
        for est in [
            sample_cov(&panel, 39, 40).unwrap(),
            lw_shrinkage(&panel, 39, 40).unwrap(),
        ] {
            assert!(linalg::is_symmetric(est.matrix(), 1e-12));
        }
    }
}
