//! CSV serialization of panels, ticks, covariance matrices, scores, weight
//! paths, reports and fee matrices. Every writer stamps a `config_hash`
//! metadata line so reruns are verifiable byte-for-byte.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::backtest::{BootstrapSummary, Metrics};
use crate::error::{Error, Result};
use crate::market_data::{DayTicks, ReturnPanel, TickSeries};
use crate::pooling::PoolWeights;
use crate::sweep::SweepRow;

/// FNV-1a over the canonical (sorted) key=value rendering of a config.
pub fn config_hash<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> u64 {
    let sorted: BTreeMap<&str, &str> = pairs.into_iter().collect();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for (k, v) in sorted {
        for byte in k.bytes().chain(*b"=").chain(v.bytes()).chain(*b"\n") {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

fn meta_line(hash: u64, extra: &[(&str, String)]) -> String {
    let mut line = format!("# config_hash={hash:016x}");
    for (k, v) in extra {
        line.push_str(&format!(",{k}={v}"));
    }
    line.push('\n');
    line
}

pub fn write_returns_csv(path: &Path, panel: &ReturnPanel, hash: u64) -> Result<()> {
    let mut out = meta_line(hash, &[]);
    out.push_str("date,asset,return\n");
    for (t, date) in panel.dates().iter().enumerate() {
        for (i, asset) in panel.assets().iter().enumerate() {
            out.push_str(&format!("{date},{asset},{}\n", panel.returns()[(t, i)]));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_ticks_csv(path: &Path, days: &[DayTicks], hash: u64) -> Result<()> {
    let mut out = meta_line(hash, &[]);
    out.push_str("date,asset,timestamp_ns,midquote\n");
    for day in days {
        for series in &day.series {
            for (ts, qt) in series.timestamps().iter().zip(series.midquotes()) {
                out.push_str(&format!("{},{},{ts},{qt}\n", day.date, series.asset()));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a `date,asset,timestamp_ns,midquote` CSV into per-day tick sets.
pub fn load_ticks_csv(path: &Path) -> Result<Vec<DayTicks>> {
    let mut raw = String::new();
    std::fs::File::open(path)?.read_to_string(&mut raw)?;
    // (date, asset) -> (timestamps, quotes), insertion-ordered by sort keys.
    let mut cells: BTreeMap<(String, String), (Vec<i64>, Vec<f64>)> = BTreeMap::new();
    let mut saw_header = false;
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line.trim() != "date,asset,timestamp_ns,midquote" {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "expected header 'date,asset,timestamp_ns,midquote', got '{}'",
                        line.trim()
                    ),
                });
            }
            saw_header = true;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 fields, got {}", parts.len()),
            });
        }
        let ts: i64 = parts[2].trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad timestamp '{}': {e}", parts[2].trim()),
        })?;
        let quote: f64 = parts[3].trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad midquote '{}': {e}", parts[3].trim()),
        })?;
        let entry = cells
            .entry((parts[0].trim().to_string(), parts[1].trim().to_string()))
            .or_default();
        entry.0.push(ts);
        entry.1.push(quote);
    }
    if cells.is_empty() {
        return Err(Error::Validation("no data".into()));
    }

    let mut days: BTreeMap<String, Vec<TickSeries>> = BTreeMap::new();
    for ((date, asset), (ts, qs)) in cells {
        days.entry(date)
            .or_default()
            .push(TickSeries::new(asset, ts, qs)?);
    }
    Ok(days
        .into_iter()
        .map(|(date, series)| DayTicks { date, series })
        .collect())
}

/// Row-major matrix CSV with a one-line metadata header.
pub fn write_matrix_csv(
    path: &Path,
    matrix: &DMatrix<f64>,
    estimator: &str,
    date: &str,
    hash: u64,
) -> Result<()> {
    let mut out = meta_line(
        hash,
        &[
            ("estimator", estimator.to_string()),
            ("date", date.to_string()),
            ("N", matrix.nrows().to_string()),
        ],
    );
    for r in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols()).map(|c| matrix[(r, c)].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut raw = String::new();
    std::fs::File::open(path)?.read_to_string(&mut raw)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|x| {
                x.trim().parse().map_err(|e| Error::Parse {
                    line: idx + 1,
                    msg: format!("bad number '{x}': {e}"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Validation("no data".into()));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

pub fn write_caps_csv(path: &Path, assets: &[String], caps: &[f64], hash: u64) -> Result<()> {
    if assets.len() != caps.len() {
        return Err(Error::Shape(format!(
            "{} assets vs {} caps",
            assets.len(),
            caps.len()
        )));
    }
    let mut out = meta_line(hash, &[]);
    out.push_str("asset,cap\n");
    for (a, c) in assets.iter().zip(caps) {
        out.push_str(&format!("{a},{c}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads `asset,cap` and returns caps aligned to the given asset order.
pub fn load_caps_csv(path: &Path, assets: &[String]) -> Result<Vec<f64>> {
    let mut raw = String::new();
    std::fs::File::open(path)?.read_to_string(&mut raw)?;
    let mut map = BTreeMap::new();
    let mut saw_header = false;
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line.trim() != "asset,cap" {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected header 'asset,cap', got '{}'", line.trim()),
                });
            }
            saw_header = true;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 2 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected 2 fields, got {}", parts.len()),
            });
        }
        let cap: f64 = parts[1].trim().parse().map_err(|e| Error::Parse {
            line: idx + 1,
            msg: format!("bad cap '{}': {e}", parts[1].trim()),
        })?;
        map.insert(parts[0].trim().to_string(), cap);
    }
    assets
        .iter()
        .map(|a| {
            map.get(a)
                .copied()
                .ok_or_else(|| Error::Data(format!("missing market cap for {a}")))
        })
        .collect()
}

/// `date,model,log_density` rows.
pub fn write_scores_csv(
    path: &Path,
    dates: &[String],
    models: &[String],
    log_scores: &DMatrix<f64>,
    hash: u64,
) -> Result<()> {
    let mut out = meta_line(hash, &[]);
    out.push_str("date,model,log_density\n");
    for (t, date) in dates.iter().enumerate() {
        for (k, model) in models.iter().enumerate() {
            out.push_str(&format!("{date},{model},{}\n", log_scores[(t, k)]));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `date,model,weight` rows.
pub fn write_pool_weights_csv(
    path: &Path,
    rows: &[(String, PoolWeights)],
    models: &[String],
    hash: u64,
) -> Result<()> {
    let mut out = meta_line(hash, &[]);
    out.push_str("date,model,weight\n");
    for (date, weights) in rows {
        for (k, model) in models.iter().enumerate() {
            out.push_str(&format!("{date},{model},{}\n", weights.values()[k]));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `date,asset,weight` rows of one strategy's weight path.
pub fn write_weights_csv(
    path: &Path,
    dates: &[String],
    assets: &[String],
    weights: &DMatrix<f64>,
    hash: u64,
) -> Result<()> {
    let mut out = meta_line(hash, &[]);
    out.push_str("date,asset,weight\n");
    for (t, date) in dates.iter().enumerate() {
        for (i, asset) in assets.iter().enumerate() {
            out.push_str(&format!("{date},{asset},{}\n", weights[(t, i)]));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One row per strategy with every metric and its bootstrap band.
pub fn write_report_csv(path: &Path, summaries: &[BootstrapSummary], hash: u64) -> Result<()> {
    let mut out = meta_line(hash, &[]);
    out.push_str("strategy");
    for name in Metrics::FIELDS {
        out.push_str(&format!(",{name},{name}_lo,{name}_hi"));
    }
    out.push('\n');
    for s in summaries {
        out.push_str(&s.strategy);
        for q in &s.quantiles {
            out.push_str(&format!(",{},{},{}", q.mean, q.lo, q.hi));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Strategies-by-strategies matrix of mean annual switching fees in basis
/// points: cell (row = to, column = from) is the fee paid to move from the
/// column strategy to the row strategy.
pub fn write_fees_csv(
    path: &Path,
    strategies: &[String],
    fees_bp: &DMatrix<f64>,
    hash: u64,
) -> Result<()> {
    if fees_bp.nrows() != strategies.len() || fees_bp.ncols() != strategies.len() {
        return Err(Error::Shape("fee matrix does not match strategies".into()));
    }
    let mut out = meta_line(hash, &[]);
    out.push_str("to_from");
    for s in strategies {
        out.push_str(&format!(",{s}"));
    }
    out.push('\n');
    for (r, s) in strategies.iter().enumerate() {
        out.push_str(s);
        for c in 0..strategies.len() {
            if r == c {
                out.push(',');
            } else {
                out.push_str(&format!(",{}", fees_bp[(r, c)]));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow], hash: u64) -> Result<()> {
    let mut out = meta_line(hash, &[]);
    out.push_str(
        "strategy,beta_ante_bp,beta_post_bp,mean_net_annual_pct,sd_net_annual_pct,sharpe_net_annual,avg_turnover_pct,avg_l1_dist_buyhold\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.strategy,
            r.beta_ante_bp,
            r.beta_post_bp,
            r.mean_net_annual_pct,
            r.sd_net_annual_pct,
            r.sharpe_net_annual,
            r.avg_turnover_pct,
            r.avg_l1_dist_buyhold
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
