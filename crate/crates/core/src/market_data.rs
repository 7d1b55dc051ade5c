//! Market data: daily return panels, intraday mid-quote ticks, refresh-time
//! synchronization and portfolio weight drift.
//!
//! The simulator produces a correlated Brownian log-price market with known
//! daily integrated covariance, optionally overlaid with a one-factor
//! stochastic-volatility scale. The exact integrated covariance of every day
//! is kept alongside the ticks so estimator tests have a ground truth.

use std::io::Read;
use std::ops::Deref;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;
use crate::rng::stream_rng;

/// Nanoseconds in one trading day (6.5 hours).
pub const DAY_NS: i64 = 23_400 * 1_000_000_000;

/// Intraday mid-quote series of one asset on one day. Timestamps are integer
/// nanoseconds since midnight; ties within one asset are rejected because the
/// refresh-time recursion needs strict ordering.
#[derive(Debug, Clone)]
pub struct TickSeries {
    asset: String,
    timestamps: Vec<i64>,
    midquotes: Vec<f64>,
}

impl TickSeries {
    pub fn new(asset: impl Into<String>, timestamps: Vec<i64>, midquotes: Vec<f64>) -> Result<Self> {
        let asset = asset.into();
        if timestamps.len() != midquotes.len() {
            return Err(Error::Shape(format!(
                "asset {asset}: {} timestamps vs {} midquotes",
                timestamps.len(),
                midquotes.len()
            )));
        }
        if timestamps.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "asset {asset}: needs at least 2 quotes per day, got {}",
                timestamps.len()
            )));
        }
        for w in timestamps.windows(2) {
            if w[1] == w[0] {
                return Err(Error::Validation(format!(
                    "asset {asset}: duplicate quote timestamp {} ns",
                    w[0]
                )));
            }
            if w[1] < w[0] {
                return Err(Error::Validation(format!(
                    "asset {asset}: timestamps not increasing at {} ns",
                    w[1]
                )));
            }
        }
        if let Some(&q) = midquotes.iter().find(|&&q| !(q > 0.0) || !q.is_finite()) {
            return Err(Error::Validation(format!(
                "asset {asset}: non-positive midquote {q}"
            )));
        }
        Ok(Self {
            asset,
            timestamps,
            midquotes,
        })
    }

    pub fn asset(&self) -> &str {
        &self.asset
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn midquotes(&self) -> &[f64] {
        &self.midquotes
    }
}

/// T x N panel of daily simple net returns.
#[derive(Debug, Clone)]
pub struct ReturnPanel {
    dates: Vec<String>,
    assets: Vec<String>,
    returns: DMatrix<f64>,
}

impl ReturnPanel {
    pub fn new(dates: Vec<String>, assets: Vec<String>, returns: DMatrix<f64>) -> Result<Self> {
        if assets.is_empty() {
            return Err(Error::Validation("panel needs at least one asset".into()));
        }
        if dates.len() < 2 {
            return Err(Error::Validation(format!(
                "panel needs at least 2 days, got {}",
                dates.len()
            )));
        }
        if returns.nrows() != dates.len() || returns.ncols() != assets.len() {
            return Err(Error::Shape(format!(
                "returns {}x{} do not match {} dates x {} assets",
                returns.nrows(),
                returns.ncols(),
                dates.len(),
                assets.len()
            )));
        }
        for w in dates.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Validation(format!(
                    "dates not strictly increasing at {}",
                    w[1]
                )));
            }
        }
        for t in 0..returns.nrows() {
            for i in 0..returns.ncols() {
                let r = returns[(t, i)];
                if !r.is_finite() {
                    return Err(Error::Validation(format!(
                        "missing or non-finite return for {} on {}",
                        assets[i], dates[t]
                    )));
                }
                if r <= -1.0 {
                    return Err(Error::Validation(format!(
                        "return {} <= -1 for {} on {}",
                        r, assets[i], dates[t]
                    )));
                }
            }
        }
        Ok(Self {
            dates,
            assets,
            returns,
        })
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    /// Return vector of day `t`.
    pub fn day(&self, t: usize) -> DVector<f64> {
        self.returns.row(t).transpose()
    }

    /// Rows `t-h+1 ..= t`: the last `h` observations ending at day `t`.
    pub fn window(&self, t: usize, h: usize) -> Result<DMatrix<f64>> {
        if h < 2 {
            return Err(Error::Range(format!("window length {h} < 2")));
        }
        if t >= self.n_days() || t + 1 < h {
            return Err(Error::Range(format!(
                "window of {h} days ending at index {t} exceeds available history of {} days",
                self.n_days()
            )));
        }
        Ok(self.returns.rows(t + 1 - h, h).into_owned())
    }

    /// Panel restricted to the given asset columns (bootstrap subsets).
    pub fn select_assets(&self, indices: &[usize]) -> Result<ReturnPanel> {
        for &i in indices {
            if i >= self.n_assets() {
                return Err(Error::Range(format!("asset index {i} out of bounds")));
            }
        }
        let assets = indices.iter().map(|&i| self.assets[i].clone()).collect();
        let mut m = DMatrix::zeros(self.n_days(), indices.len());
        for (j, &i) in indices.iter().enumerate() {
            m.set_column(j, &self.returns.column(i));
        }
        ReturnPanel::new(self.dates.clone(), assets, m)
    }

    /// Panel truncated to the first `t` days.
    pub fn truncate(&self, t: usize) -> Result<ReturnPanel> {
        if t < 2 || t > self.n_days() {
            return Err(Error::Range(format!("cannot truncate to {t} days")));
        }
        ReturnPanel::new(
            self.dates[..t].to_vec(),
            self.assets.clone(),
            self.returns.rows(0, t).into_owned(),
        )
    }
}

/// Refresh-time synchronized log returns of one block on one day.
#[derive(Debug, Clone)]
pub struct SyncedReturns {
    pub block_id: usize,
    refresh_times: Vec<i64>,
    log_returns: DMatrix<f64>,
}

impl SyncedReturns {
    pub fn refresh_times(&self) -> &[i64] {
        &self.refresh_times
    }

    /// (#refresh - 1) x (#block assets) matrix.
    pub fn log_returns(&self) -> &DMatrix<f64> {
        &self.log_returns
    }

    pub fn n_returns(&self) -> usize {
        self.log_returns.nrows()
    }
}

/// Fully invested portfolio weights: entries sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(DVector<f64>);

impl Weights {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("weights must not be empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("weights must be finite".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::Validation(format!(
                "weights sum to {sum}, expected 1 within 1e-10"
            )));
        }
        Ok(Self(values))
    }

    /// 1/N in every asset.
    pub fn uniform(n: usize) -> Self {
        Self(DVector::from_element(n, 1.0 / n as f64))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

impl Deref for Weights {
    type Target = DVector<f64>;

    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

/// Mechanical weight drift between rebalancing dates:
/// `w+ = (w o (1+r)) / (1 + w'r)`.
pub fn drifted_weights(weights: &Weights, returns: &DVector<f64>) -> Result<Weights> {
    if weights.len() != returns.len() {
        return Err(Error::Shape(format!(
            "{} weights vs {} returns",
            weights.len(),
            returns.len()
        )));
    }
    let growth = 1.0 + weights.values().dot(returns);
    if growth <= 0.0 {
        return Err(Error::Domain(format!(
            "portfolio wiped out: 1 + w'r = {growth} <= 0"
        )));
    }
    let drifted = DVector::from_iterator(
        weights.len(),
        weights
            .values()
            .iter()
            .zip(returns.iter())
            .map(|(w, r)| w * (1.0 + r) / growth),
    );
    Weights::new(drifted)
}

/// Refresh-time sampling of one block of tick series:
/// the first refresh time is the latest first quote across block assets, and
/// each subsequent refresh time is the latest first quote strictly after the
/// previous one. Prices are the last mid-quote at or before each refresh time
/// (a quote landing exactly on the refresh time counts).
pub fn refresh_time_sample(block_id: usize, ticks: &[&TickSeries]) -> Result<SyncedReturns> {
    if ticks.is_empty() {
        return Err(Error::InsufficientData("empty block".into()));
    }
    for ts in ticks {
        if ts.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "asset {} has fewer than 2 quotes",
                ts.asset()
            )));
        }
    }

    let n_assets = ticks.len();
    let mut refresh_times = Vec::new();
    // Index of the next quote strictly after the current refresh time.
    let mut next = vec![0usize; n_assets];

    let first = ticks
        .iter()
        .map(|ts| ts.timestamps()[0])
        .max()
        .expect("non-empty block");
    refresh_times.push(first);

    loop {
        let mut candidate = i64::MIN;
        let mut exhausted = false;
        let current = *refresh_times.last().expect("non-empty");
        for (i, ts) in ticks.iter().enumerate() {
            while next[i] < ts.len() && ts.timestamps()[next[i]] <= current {
                next[i] += 1;
            }
            if next[i] >= ts.len() {
                exhausted = true;
                break;
            }
            candidate = candidate.max(ts.timestamps()[next[i]]);
        }
        if exhausted {
            break;
        }
        refresh_times.push(candidate);
    }

    if refresh_times.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "block {block_id}: fewer than 2 refresh times"
        )));
    }

    // Log prices at refresh times: last quote at or before each refresh time.
    let mut log_prices = DMatrix::zeros(refresh_times.len(), n_assets);
    for (i, ts) in ticks.iter().enumerate() {
        let mut k = 0usize;
        for (l, &rt) in refresh_times.iter().enumerate() {
            while k + 1 < ts.len() && ts.timestamps()[k + 1] <= rt {
                k += 1;
            }
            debug_assert!(ts.timestamps()[k] <= rt);
            log_prices[(l, i)] = ts.midquotes()[k].ln();
        }
    }

    let mut log_returns = DMatrix::zeros(refresh_times.len() - 1, n_assets);
    for l in 1..refresh_times.len() {
        for i in 0..n_assets {
            log_returns[(l - 1, i)] = log_prices[(l, i)] - log_prices[(l - 1, i)];
        }
    }

    Ok(SyncedReturns {
        block_id,
        refresh_times,
        log_returns,
    })
}

/// Loads a daily return panel from a `date,asset,return` CSV.
pub fn load_return_panel(path: &Path) -> Result<ReturnPanel> {
    let mut raw = String::new();
    std::fs::File::open(path)?.read_to_string(&mut raw)?;
    parse_return_panel(&raw)
}

pub fn parse_return_panel(raw: &str) -> Result<ReturnPanel> {
    let mut rows: Vec<(usize, String, String, f64)> = Vec::new();
    let mut lines = raw.lines().enumerate();

    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() || l.starts_with('#') => continue,
            Some((n, l)) => break Some((n, l)),
            None => break None,
        }
    };
    match header {
        None => return Err(Error::Validation("no data".into())),
        Some((n, l)) => {
            if l.trim() != "date,asset,return" {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("expected header 'date,asset,return', got '{}'", l.trim()),
                });
            }
        }
    }

    for (n, line) in lines {
        let line_no = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        let ret: f64 = parts[2].trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad return '{}': {e}", parts[2].trim()),
        })?;
        rows.push((
            line_no,
            parts[0].trim().to_string(),
            parts[1].trim().to_string(),
            ret,
        ));
    }
    if rows.is_empty() {
        return Err(Error::Validation("no data".into()));
    }

    let mut dates: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
    dates.sort();
    dates.dedup();
    let mut assets: Vec<String> = rows.iter().map(|r| r.2.clone()).collect();
    assets.sort();
    assets.dedup();

    let date_idx = |d: &str| dates.binary_search_by(|x| x.as_str().cmp(d)).unwrap();
    let asset_idx = |a: &str| assets.binary_search_by(|x| x.as_str().cmp(a)).unwrap();

    let mut m = DMatrix::from_element(dates.len(), assets.len(), f64::NAN);
    for (line_no, date, asset, ret) in &rows {
        if *ret <= -1.0 {
            return Err(Error::Validation(format!(
                "line {line_no}: return {ret} <= -1 for {asset} on {date}"
            )));
        }
        let (t, i) = (date_idx(date), asset_idx(asset));
        if !m[(t, i)].is_nan() {
            return Err(Error::Validation(format!(
                "line {line_no}: duplicate cell for {asset} on {date}"
            )));
        }
        m[(t, i)] = *ret;
    }
    for t in 0..dates.len() {
        for i in 0..assets.len() {
            if m[(t, i)].is_nan() {
                return Err(Error::Validation(format!(
                    "missing cell for {} on {}",
                    assets[i], dates[t]
                )));
            }
        }
    }
    ReturnPanel::new(dates, assets, m)
}

/// Proleptic Gregorian date string for a days-since-epoch count.
pub fn date_from_epoch_day(epoch_day: i64) -> String {
    let z = epoch_day + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    format!("{y:04}-{m:02}-{d:02}")
}

/// One-factor stochastic-volatility overlay: the whole covariance is scaled
/// by `exp(s_d)` with `s_d = phi * s_{d-1} + vol_of_vol * eta_d`.
#[derive(Debug, Clone)]
pub struct SvOverlay {
    pub phi: f64,
    pub vol_of_vol: f64,
}

/// Structure of the constant base covariance: `Lambda Lambda' + idio^2 I`
/// with loadings drawn once per simulation.
#[derive(Debug, Clone)]
pub struct FactorConfig {
    pub n_factors: usize,
    /// Scale of factor loadings (daily volatility units).
    pub factor_vol: f64,
    /// Idiosyncratic daily volatility.
    pub idio_vol: f64,
    pub sv: Option<SvOverlay>,
}

impl Default for FactorConfig {
    fn default() -> Self {
        Self {
            n_factors: 1,
            factor_vol: 0.008,
            idio_vol: 0.01,
            sv: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct NoiseConfig {
    /// Variance of the iid log-noise multiplying the latent price.
    pub variance: f64,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_assets: usize,
    pub n_days: usize,
    pub factor: FactorConfig,
    pub noise: NoiseConfig,
    /// Expected quote updates per second per asset.
    pub tick_intensity: f64,
    /// When false, intraday ticks are skipped; daily returns are unchanged.
    pub with_ticks: bool,
    /// Common log-price drift per day.
    pub daily_drift: f64,
    /// Calendar day of the first trading day (days since 1970-01-01).
    pub start_epoch_day: i64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_assets: 4,
            n_days: 50,
            factor: FactorConfig::default(),
            noise: NoiseConfig::default(),
            tick_intensity: 0.5,
            with_ticks: true,
            daily_drift: 0.0,
            start_epoch_day: 18_262, // 2020-01-01
        }
    }
}

/// Ticks of all assets on one day.
#[derive(Debug, Clone)]
pub struct DayTicks {
    pub date: String,
    pub series: Vec<TickSeries>,
}

/// Simulated market with per-day ground-truth integrated covariance.
#[derive(Debug, Clone)]
pub struct MarketSim {
    pub panel: ReturnPanel,
    pub ticks: Vec<DayTicks>,
    /// Exact integrated covariance of each day, in daily variance units.
    pub sigma_true: Vec<DMatrix<f64>>,
    /// Synthetic market capitalizations, one per asset.
    pub caps: Vec<f64>,
}

const STREAM_SETUP: u64 = u64::MAX;

pub fn simulate_market(config: &SimConfig, seed: u64) -> Result<MarketSim> {
    if config.n_assets < 1 {
        return Err(Error::Config("n_assets must be >= 1".into()));
    }
    if config.n_days < 2 {
        return Err(Error::Config("n_days must be >= 2".into()));
    }
    if config.noise.variance < 0.0 {
        return Err(Error::Config("noise variance must be >= 0".into()));
    }
    if config.with_ticks && !(config.tick_intensity > 0.0) {
        return Err(Error::Config("tick intensity must be > 0".into()));
    }

    let n = config.n_assets;
    let mut setup = stream_rng(seed, STREAM_SETUP);

    // Base covariance: loadings + idiosyncratic diagonal.
    let k = config.factor.n_factors;
    let mut lambda = DMatrix::zeros(n, k);
    for i in 0..n {
        for f in 0..k {
            let z: f64 = setup.sample(StandardNormal);
            lambda[(i, f)] = config.factor.factor_vol / (k.max(1) as f64).sqrt() * (1.0 + 0.3 * z);
        }
    }
    let mut sigma_base = &lambda * lambda.transpose();
    for i in 0..n {
        sigma_base[(i, i)] += config.factor.idio_vol * config.factor.idio_vol;
    }

    // Per-day variance scale from the optional SV overlay.
    let mut scales = vec![1.0f64; config.n_days];
    if let Some(sv) = &config.factor.sv {
        let mut s = 0.0f64;
        for scale in scales.iter_mut() {
            let eta: f64 = setup.sample(StandardNormal);
            s = sv.phi * s + sv.vol_of_vol * eta;
            *scale = s.exp();
        }
    }

    // Synthetic market caps: lognormal sizes.
    let caps: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = setup.sample(StandardNormal);
            1e9 * (z).exp()
        })
        .collect();

    let days: Vec<usize> = (0..config.n_days).collect();
    let cfg = config.clone();
    let sim_days = exec::try_par_map(days, move |d| simulate_day(&cfg, seed, d))?;

    let mut dates = Vec::with_capacity(config.n_days);
    let mut returns = DMatrix::zeros(config.n_days, n);
    let mut ticks = Vec::new();
    let mut sigma_true = Vec::with_capacity(config.n_days);
    for (d, day) in sim_days.into_iter().enumerate() {
        let date = date_from_epoch_day(config.start_epoch_day + d as i64);
        let sigma_day = &sigma_base * scales[d];
        let chol = linalg::chol_lower(&sigma_day)
            .map_err(|e| Error::Config(format!("base covariance not PD: {e}")))?;
        let realized = finish_day(&chol, config, seed, d, day)?;
        for i in 0..n {
            returns[(d, i)] = realized.simple_returns[i];
        }
        if let Some(series) = realized.ticks {
            ticks.push(DayTicks {
                date: date.clone(),
                series,
            });
        }
        sigma_true.push(sigma_day);
        dates.push(date);
    }

    let assets: Vec<String> = (0..n).map(|i| format!("A{:03}", i)).collect();
    let panel = ReturnPanel::new(dates, assets, returns)?;
    Ok(MarketSim {
        panel,
        ticks,
        sigma_true,
        caps,
    })
}

/// Raw per-day draws; tick-time generation happens in parallel, the price
/// bridge is filled in afterwards (needs the Cholesky factor of the day).
struct DayDraws {
    close_z: Vec<f64>,
    tick_times: Vec<Vec<i64>>,
}

struct DayRealized {
    simple_returns: Vec<f64>,
    ticks: Option<Vec<TickSeries>>,
}

fn simulate_day(config: &SimConfig, seed: u64, day: usize) -> Result<DayDraws> {
    let n = config.n_assets;
    let mut rng = stream_rng(seed, day as u64);

    // Order matters: the close draw comes first so daily returns are
    // identical with and without tick generation.
    let close_z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();

    let mut tick_times = Vec::new();
    if config.with_ticks {
        let exp = Exp::new(config.tick_intensity)
            .map_err(|e| Error::Config(format!("bad tick intensity: {e}")))?;
        for _ in 0..n {
            // Forced open and close quotes guarantee two ticks per day.
            let mut times: Vec<i64> = vec![0];
            let mut t = 0.0f64;
            loop {
                t += exp.sample(&mut rng);
                let ns = (t * 1e9) as i64;
                if ns >= DAY_NS {
                    break;
                }
                if *times.last().expect("non-empty") != ns {
                    times.push(ns);
                }
            }
            times.push(DAY_NS);
            tick_times.push(times);
        }
    }
    Ok(DayDraws {
        close_z,
        tick_times,
    })
}

fn finish_day(
    chol: &DMatrix<f64>,
    config: &SimConfig,
    seed: u64,
    day: usize,
    draws: DayDraws,
) -> Result<DayRealized> {
    let n = config.n_assets;
    // Bridge and noise draws live on their own sub-stream so that daily
    // returns depend only on the draws taken in `simulate_day`.
    let mut rng = stream_rng(seed, (day as u64) ^ 0x8000_0000_0000_0000);

    let z = DVector::from_vec(draws.close_z);
    let close_incr = chol * z + DVector::from_element(n, config.daily_drift);

    let simple_returns: Vec<f64> = close_incr.iter().map(|&x| x.exp() - 1.0).collect();

    if !config.with_ticks {
        return Ok(DayRealized {
            simple_returns,
            ticks: None,
        });
    }

    // Union grid of all tick times, then a Brownian bridge from open to close.
    let mut grid: Vec<i64> = draws.tick_times.iter().flatten().cloned().collect();
    grid.sort_unstable();
    grid.dedup();

    let mut log_prices: Vec<DVector<f64>> = Vec::with_capacity(grid.len());
    // Open log price 0 for every asset (prices are relative within the day;
    // absolute levels carry over via the panel, quotes get a base of 100).
    let mut x = DVector::zeros(n);
    let close = close_incr.clone();
    let mut u_prev = 0.0f64;
    for &t in &grid {
        let u = t as f64 / DAY_NS as f64;
        if t == 0 {
            log_prices.push(x.clone());
            continue;
        }
        if t == DAY_NS {
            x = close.clone();
        } else {
            let du = u - u_prev;
            let total = 1.0 - u_prev;
            let mean = &x + (&close - &x) * (du / total);
            let var_scale = du * (1.0 - u) / total;
            let zz = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            x = mean + chol * zz * var_scale.sqrt();
        }
        u_prev = u;
        log_prices.push(x.clone());
    }

    let grid_index = |t: i64| grid.binary_search(&t).expect("grid contains all tick times");

    let noise_sd = config.noise.variance.sqrt();
    let mut series = Vec::with_capacity(n);
    for (i, times) in draws.tick_times.iter().enumerate() {
        let mut quotes = Vec::with_capacity(times.len());
        for &t in times {
            let latent = log_prices[grid_index(t)][i];
            let noise: f64 = if noise_sd > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                z * noise_sd
            } else {
                0.0
            };
            quotes.push(100.0 * (latent + noise).exp());
        }
        series.push(TickSeries::new(
            format!("A{:03}", i),
            times.clone(),
            quotes,
        )?);
    }

    Ok(DayRealized {
        simple_returns,
        ticks: Some(series),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ticks(asset: &str, ts: &[i64]) -> TickSeries {
        TickSeries::new(
            asset,
            ts.to_vec(),
            ts.iter().map(|&t| 100.0 + t as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn drift_identity_under_zero_returns() {
        let w = Weights::new(DVector::from_vec(vec![0.3, 0.7])).unwrap();
        let out = drifted_weights(&w, &DVector::zeros(2)).unwrap();
        assert_relative_eq!((out.values() - w.values()).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn drift_two_asset_example() {
        let w = Weights::new(DVector::from_vec(vec![0.5, 0.5])).unwrap();
        let out = drifted_weights(&w, &DVector::from_vec(vec![0.1, -0.1])).unwrap();
        assert_relative_eq!(out[0], 0.55, epsilon = 1e-12);
        assert_relative_eq!(out[1], 0.45, epsilon = 1e-12);
    }

    #[test]
    fn drift_single_exposure_is_fixed_point() {
        let w = Weights::new(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let out = drifted_weights(&w, &DVector::from_vec(vec![0.35, -0.2])).unwrap();
        assert_relative_eq!(out[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(out[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn drift_rejects_wipeout() {
        let w = Weights::new(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let r = DVector::from_vec(vec![-1.0, 0.0]);
        assert!(matches!(drifted_weights(&w, &r), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn drift_sums_to_one(
            raw in proptest::collection::vec(-0.4f64..0.6, 2..8),
            rets in proptest::collection::vec(-0.2f64..0.2, 2..8),
        ) {
            let n = raw.len().min(rets.len());
            let mut w = DVector::from_vec(raw[..n].to_vec());
            let s: f64 = w.iter().sum();
            prop_assume!(s.abs() > 0.2);
            w /= s;
            let w = Weights::new(w).unwrap();
            let r = DVector::from_vec(rets[..n].to_vec());
            prop_assume!(1.0 + w.values().dot(&r) > 0.05);
            let out = drifted_weights(&w, &r).unwrap();
            let total: f64 = out.values().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn refresh_times_synchronous_case() {
        let a = ticks("A", &[1, 2, 3]);
        let b = ticks("B", &[1, 2, 3]);
        let sync = refresh_time_sample(0, &[&a, &b]).unwrap();
        assert_eq!(sync.refresh_times(), &[1, 2, 3]);
    }

    #[test]
    fn refresh_times_interleaved_case() {
        let a = ticks("A", &[1, 3, 5]);
        let b = ticks("B", &[2, 4, 6]);
        let sync = refresh_time_sample(0, &[&a, &b]).unwrap();
        assert_eq!(sync.refresh_times(), &[2, 4, 6]);
    }

    #[test]
    fn refresh_single_asset_is_identity() {
        let a = TickSeries::new("A", vec![1, 2, 3], vec![100.0, 101.0, 99.0]).unwrap();
        let sync = refresh_time_sample(0, &[&a]).unwrap();
        assert_eq!(sync.refresh_times(), &[1, 2, 3]);
        assert_relative_eq!(
            sync.log_returns()[(0, 0)],
            (101.0f64 / 100.0).ln(),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            sync.log_returns()[(1, 0)],
            (99.0f64 / 101.0).ln(),
            epsilon = 1e-15
        );
    }

    proptest! {
        #[test]
        fn refresh_intervals_contain_a_quote_of_every_asset(
            ta in proptest::collection::btree_set(0i64..500, 2..40),
            tb in proptest::collection::btree_set(0i64..500, 2..40),
        ) {
            let a = ticks("A", &ta.iter().cloned().collect::<Vec<_>>());
            let b = ticks("B", &tb.iter().cloned().collect::<Vec<_>>());
            // Disjoint quote ranges legitimately yield < 2 refresh times.
            let sync = match refresh_time_sample(0, &[&a, &b]) {
                Ok(s) => s,
                Err(Error::InsufficientData(_)) => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
            };
            let rts = sync.refresh_times();
            prop_assert!(rts.len() <= ta.len().min(tb.len()));
            for w in rts.windows(2) {
                for ts in [&ta, &tb] {
                    prop_assert!(ts.iter().any(|&t| t > w[0] && t <= w[1]));
                }
            }
        }
    }

    #[test]
    fn tick_series_rejects_duplicate_timestamps() {
        let r = TickSeries::new("A", vec![1, 1, 2], vec![1.0, 1.0, 1.0]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn parse_panel_round_trip() {
        let csv = "date,asset,return\n2020-01-02,X,0.01\n2020-01-01,X,0.02\n2020-01-01,Y,-0.01\n2020-01-02,Y,0.03\n2020-01-03,X,0.0\n2020-01-03,Y,0.0\n";
        let p = parse_return_panel(csv).unwrap();
        assert_eq!(p.n_days(), 3);
        assert_eq!(p.n_assets(), 2);
        assert_eq!(p.dates()[0], "2020-01-01");
        assert_eq!(p.assets(), &["X".to_string(), "Y".to_string()]);
        assert_relative_eq!(p.returns()[(0, 0)], 0.02);
        assert_relative_eq!(p.returns()[(1, 1)], 0.03);
    }

    #[test]
    fn parse_panel_flags_bad_return_row() {
        let csv = "date,asset,return\n2020-01-01,X,-1.5\n2020-01-02,X,0.0\n";
        let err = parse_return_panel(csv).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_panel_empty_file_is_no_data() {
        let err = parse_return_panel("").unwrap_err();
        match err {
            Error::Validation(msg) => assert_eq!(msg, "no data"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_panel_missing_cell() {
        let csv = "date,asset,return\n2020-01-01,X,0.01\n2020-01-02,X,0.0\n2020-01-01,Y,0.0\n";
        let err = parse_return_panel(csv).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("missing cell"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dates_are_iso() {
        assert_eq!(date_from_epoch_day(18_262), "2020-01-01");
        assert_eq!(date_from_epoch_day(0), "1970-01-01");
        assert_eq!(date_from_epoch_day(18_262 + 60), "2020-03-01");
    }

    #[test]
    fn simulation_is_deterministic() {
        let config = SimConfig {
            n_assets: 3,
            n_days: 4,
            tick_intensity: 0.05,
            ..SimConfig::default()
        };
        let a = simulate_market(&config, 7).unwrap();
        let b = simulate_market(&config, 7).unwrap();
        assert_eq!(a.panel.returns(), b.panel.returns());
        for (da, db) in a.ticks.iter().zip(b.ticks.iter()) {
            for (sa, sb) in da.series.iter().zip(db.series.iter()) {
                assert_eq!(sa.timestamps(), sb.timestamps());
                assert_eq!(sa.midquotes(), sb.midquotes());
            }
        }
    }

    #[test]
    fn daily_returns_do_not_depend_on_tick_generation() {
        let with = SimConfig {
            n_assets: 2,
            n_days: 6,
            tick_intensity: 0.02,
            ..SimConfig::default()
        };
        let without = SimConfig {
            with_ticks: false,
            ..with.clone()
        };
        let a = simulate_market(&with, 3).unwrap();
        let b = simulate_market(&without, 3).unwrap();
        assert_eq!(a.panel.returns(), b.panel.returns());
        assert!(b.ticks.is_empty());
    }

    #[test]
    fn noiseless_ticks_realized_variance_near_truth() {
        let config = SimConfig {
            n_assets: 1,
            n_days: 2,
            tick_intensity: 1.0,
            factor: FactorConfig {
                n_factors: 1,
                factor_vol: 0.01,
                idio_vol: 0.01,
                sv: None,
            },
            ..SimConfig::default()
        };
        let sim = simulate_market(&config, 11).unwrap();
        for (day, dt) in sim.ticks.iter().enumerate() {
            let s = &dt.series[0];
            let rv: f64 = s
                .midquotes()
                .windows(2)
                .map(|w| (w[1] / w[0]).ln().powi(2))
                .sum();
            let truth = sim.sigma_true[day][(0, 0)];
            assert!(
                (rv - truth).abs() < 0.3 * truth,
                "day {day}: rv {rv} vs truth {truth}"
            );
        }
    }

    #[test]
    fn realized_covariance_rmse_decreases_with_intensity() {
        let mut rmses = Vec::new();
        for &intensity in &[1.0, 10.0, 100.0] {
            let config = SimConfig {
                n_assets: 1,
                n_days: 10,
                tick_intensity: intensity,
                ..SimConfig::default()
            };
            let sim = simulate_market(&config, 5).unwrap();
            let mut sq = 0.0;
            for (day, dt) in sim.ticks.iter().enumerate() {
                let s = &dt.series[0];
                let rv: f64 = s
                    .midquotes()
                    .windows(2)
                    .map(|w| (w[1] / w[0]).ln().powi(2))
                    .sum();
                sq += (rv - sim.sigma_true[day][(0, 0)]).powi(2);
            }
            rmses.push((sq / sim.ticks.len() as f64).sqrt());
        }
        assert!(rmses[1] < rmses[0], "{rmses:?}");
        assert!(rmses[2] < rmses[1], "{rmses:?}");
    }

    #[test]
    fn rejects_nonpositive_intensity() {
        let config = SimConfig {
            tick_intensity: 0.0,
            ..SimConfig::default()
        };
        assert!(matches!(
            simulate_market(&config, 1),
            Err(Error::Config(_))
        ));
    }
}
