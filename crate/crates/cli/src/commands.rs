//! Subcommand implementations tying the engine into reproducible pipelines.

use std::path::PathBuf;

use costfolio::nalgebra::DMatrix;

use costfolio::backtest::{
    bootstrap_run, compute_score_panel, performance_fee, pool_weight_series, run_backtest,
    BacktestConfig, BootstrapSummary, CostKind, MarketData, SolverKind, Strategy,
    TRADING_DAYS_PER_YEAR,
};
use costfolio::covariance::{
    brk_covariance, lw_shrinkage, sample_cov, BlockPartition, Bandwidth, KernelConfig,
};
use costfolio::market_data::{load_return_panel, simulate_market, FactorConfig, NoiseConfig, SimConfig, SvOverlay};
use costfolio::predictive::ModelKind;
use costfolio::sweep::{sweep_beta, SweepConfig, SweepEstimator};
use costfolio::{io as csv, Error, Result};

use crate::config::Config;

fn ensure_out_dir(config: &Config) -> Result<PathBuf> {
    let out = config
        .opt_path("out_dir")
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

fn sim_config(config: &Config) -> Result<SimConfig> {
    let sv = if config.bool_or("sv_overlay", false)? {
        Some(SvOverlay {
            phi: config.f64_or("sv_overlay_phi", 0.98)?,
            vol_of_vol: config.f64_or("sv_overlay_vol_of_vol", 0.1)?,
        })
    } else {
        None
    };
    Ok(SimConfig {
        n_assets: config.usize_or("n_assets", 4)?,
        n_days: config.usize_or("n_days", 300)?,
        factor: FactorConfig {
            n_factors: config.usize_or("n_factors", 1)?,
            factor_vol: config.f64_or("factor_vol", 0.008)?,
            idio_vol: config.f64_or("idio_vol", 0.01)?,
            sv,
        },
        noise: NoiseConfig {
            variance: config.f64_or("noise_variance", 0.0)?,
        },
        tick_intensity: config.f64_or("tick_intensity", 0.5)?,
        with_ticks: config.bool_or("with_ticks", false)?,
        daily_drift: config.f64_or("daily_drift", 0.0)?,
        start_epoch_day: 18_262,
    })
}

/// Loads market data from CSV paths or simulates it, per config.
fn load_market(config: &Config, seed: u64) -> Result<MarketData> {
    if let Some(path) = config.opt_path("returns_csv") {
        let panel = load_return_panel(&path)?;
        let ticks = match config.opt_path("ticks_csv") {
            Some(p) => csv::load_ticks_csv(&p)?,
            None => Vec::new(),
        };
        let caps = match config.opt_path("caps_csv") {
            Some(p) => csv::load_caps_csv(&p, panel.assets())?,
            None => Vec::new(),
        };
        return Ok(MarketData { panel, ticks, caps });
    }
    if config.bool_or("simulate", false)? {
        let sim = simulate_market(&sim_config(config)?, seed)?;
        return Ok(MarketData::from_sim(sim));
    }
    Err(Error::Config(
        "set either 'returns_csv' or 'simulate = true' (with simulator fields)".into(),
    ))
}

fn kernel_config(config: &Config) -> Result<KernelConfig> {
    let bandwidth = match config.str_or("kernel_bandwidth", "auto").as_str() {
        "auto" => Bandwidth::Automatic,
        fixed => Bandwidth::Fixed(fixed.parse().map_err(|e| {
            Error::Config(format!("field 'kernel_bandwidth': '{fixed}': {e}"))
        })?),
    };
    Ok(KernelConfig {
        bandwidth,
        smoothing_window: config.usize_or("smoothing_window", 5)?,
        min_block_returns: config.usize_or("min_block_returns", 2)?,
    })
}

fn backtest_config(config: &Config, seed: u64) -> Result<BacktestConfig> {
    let mut out = BacktestConfig {
        gamma: config.f64_or("gamma", 4.0)?,
        beta: config.f64_or("beta_bp", 50.0)? * 1e-4,
        beta_post: match config.opt_str("beta_post_bp") {
            Some(_) => Some(config.f64_or("beta_post_bp", 50.0)? * 1e-4),
            None => None,
        },
        cost_kind: match config.str_or("cost_kind", "l1").as_str() {
            "l1" => CostKind::L1,
            "l2" => CostKind::L2,
            other => return Err(Error::Config(format!("field 'cost_kind': '{other}'"))),
        },
        estimation_window: config.usize_or("estimation_window", 500)?,
        pooling_window: config.usize_or("pooling_window", 250)?,
        trade_threshold: config.f64_or("trade_threshold", 1e-5)?,
        seed,
        warmup: match config.opt_str("warmup") {
            Some(_) => Some(config.usize_or("warmup", 0)?),
            None => None,
        },
        solver: match config.str_or("solver", "eu").as_str() {
            "ce" => SolverKind::CertaintyEquivalent,
            "eu" => SolverKind::ExpectedUtility {
                n_draws: config.usize_or("n_draws", 10_000)?,
            },
            other => return Err(Error::Config(format!("field 'solver': '{other}'"))),
        },
        mixture_models: config
            .str_list_or("models", &["sample", "lw"])
            .iter()
            .map(|s| parse_model(s))
            .collect::<Result<_>>()?,
        kernel: kernel_config(config)?,
        n_liquidity_groups: config.usize_or("n_groups", 4)?,
        kappa_window: config.usize_or("kappa_window", 60)?,
        kappa_refit_every: config.usize_or("kappa_refit_every", 5)?,
        sv_factors: config.usize_or("sv_factors", 1)?,
        sv_refit_every: config.usize_or("sv_refit_every", 5)?,
        sv_cov_draws: config.usize_or("sv_cov_draws", 500)?,
        max_flagged_frac: config.f64_or("max_flagged_frac", 0.01)?,
        ..BacktestConfig::default()
    };
    out.kappa.n_draws = config.usize_or("kappa_draws", 1000)?;
    out.kappa.burnin = config.usize_or("kappa_burnin", 500)?;
    out.kappa.prior_rate = config.f64_or("kappa_prior_rate", 100.0)?;
    out.sv.burnin = config.usize_or("sv_burnin", 1000)?;
    out.sv.kept = config.usize_or("sv_kept", 1000)?;
    out.sv.thin = config.usize_or("sv_thin", 5)?;
    out.sv.min_window = config.usize_or("sv_min_window", 250)?;
    Ok(out)
}

fn parse_model(name: &str) -> Result<ModelKind> {
    Ok(match name {
        "sample" => ModelKind::GaussianSample,
        "lw" => ModelKind::GaussianLw,
        "brk" => ModelKind::WishartBrk,
        "sv" => ModelKind::FactorSv,
        "mixture" => ModelKind::Mixture,
        other => return Err(Error::Config(format!("unknown model '{other}'"))),
    })
}

fn parse_strategy(name: &str) -> Result<Strategy> {
    if let Some(theta) = name.strip_prefix("gross_exposure_") {
        return Ok(Strategy::GrossExposure {
            theta: theta
                .parse()
                .map_err(|e| Error::Config(format!("strategy '{name}': {e}")))?,
        });
    }
    Ok(match name {
        "naive" => Strategy::Naive { rebalance_every: 1 },
        "naive_2m" => Strategy::Naive { rebalance_every: 42 },
        "mvp" => Strategy::Mvp,
        "mvp_no_short" => Strategy::MvpNoShort,
        "tu_zhou" => Strategy::TuZhou,
        "kan_zhou" => Strategy::KanZhou,
        "jorion" => Strategy::Jorion,
        "market_buy_hold" => Strategy::MarketBuyHold,
        model => {
            let (model, cost_aware) = match model.strip_suffix("_no_tc") {
                Some(m) => (m, false),
                None => (model, true),
            };
            Strategy::ModelBased {
                model: parse_model(model)?,
                cost_aware,
            }
        }
    })
}

pub fn cmd_simulate(config: &Config, seed: u64) -> Result<()> {
    let out = ensure_out_dir(config)?;
    let hash = config.hash();
    let mut sim_cfg = sim_config(config)?;
    // The simulate subcommand exists to emit data files; default ticks on.
    if config.opt_str("with_ticks").is_none() {
        sim_cfg.with_ticks = true;
    }
    let sim = simulate_market(&sim_cfg, seed)?;
    csv::write_returns_csv(&out.join("returns.csv"), &sim.panel, hash)?;
    if !sim.ticks.is_empty() {
        csv::write_ticks_csv(&out.join("ticks.csv"), &sim.ticks, hash)?;
    }
    csv::write_caps_csv(
        &out.join("caps.csv"),
        sim.panel.assets(),
        &sim.caps,
        hash,
    )?;
    for (d, sigma) in sim.sigma_true.iter().enumerate() {
        let date = &sim.panel.dates()[d];
        csv::write_matrix_csv(
            &out.join(format!("ground_truth_cov_{date}.csv")),
            sigma,
            "ground_truth",
            date,
            hash,
        )?;
    }
    println!(
        "simulated {} assets x {} days into {}",
        sim.panel.n_assets(),
        sim.panel.n_days(),
        out.display()
    );
    Ok(())
}

pub fn cmd_estimate(config: &Config, seed: u64) -> Result<()> {
    let out = ensure_out_dir(config)?;
    let hash = config.hash();
    let data = load_market(config, seed)?;
    let window = config.usize_or("estimation_window", 500)?;
    let estimators = config.str_list_or("estimators", &["sample", "lw"]);
    let kernel = kernel_config(config)?;
    let mut written = 0usize;

    for est in &estimators {
        match est.as_str() {
            "sample" | "lw" => {
                for t in window - 1..data.panel.n_days() {
                    let e = if est == "sample" {
                        sample_cov(&data.panel, t, window)?
                    } else {
                        lw_shrinkage(&data.panel, t, window)?
                    };
                    let date = &data.panel.dates()[t];
                    csv::write_matrix_csv(
                        &out.join(format!("cov_{est}_{date}.csv")),
                        e.matrix(),
                        est,
                        date,
                        hash,
                    )?;
                    written += 1;
                }
            }
            "brk" => {
                if data.ticks.is_empty() {
                    return Err(Error::Config(
                        "estimator 'brk' needs tick data ('ticks_csv' or simulate with_ticks)".into(),
                    ));
                }
                let partition = BlockPartition::by_liquidity(
                    &data.ticks[0].series,
                    config.usize_or("n_groups", 4)?,
                )?;
                for day in &data.ticks {
                    let e = brk_covariance(&day.series, &partition, &kernel, &day.date)?;
                    csv::write_matrix_csv(
                        &out.join(format!("cov_brk_{}.csv", day.date)),
                        e.matrix(),
                        "brk",
                        &day.date,
                        hash,
                    )?;
                    written += 1;
                }
            }
            other => {
                return Err(Error::Config(format!("unknown estimator '{other}'")));
            }
        }
    }
    println!("wrote {written} covariance files to {}", out.display());
    Ok(())
}

fn strategies_from(config: &Config) -> Result<Vec<Strategy>> {
    config
        .str_list_or("strategies", &["sample", "lw", "naive"])
        .iter()
        .map(|s| parse_strategy(s))
        .collect()
}

pub fn cmd_backtest(config: &Config, seed: u64) -> Result<()> {
    let out = ensure_out_dir(config)?;
    let hash = config.hash();
    let data = load_market(config, seed)?;
    let bt = backtest_config(config, seed)?;
    let strategies = strategies_from(config)?;

    let mut lines = String::from("strategy");
    for f in costfolio::backtest::Metrics::FIELDS {
        lines.push_str(&format!(",{f}"));
    }
    lines.push('\n');

    let verbose = config.bool_or("verbose", false)?;
    for strategy in &strategies {
        let report = run_backtest(strategy, &data, &bt)?;
        csv::write_weights_csv(
            &out.join(format!("weights_{}.csv", report.strategy)),
            &report.dates,
            data.panel.assets(),
            &report.weights,
            hash,
        )?;
        if verbose && !report.diagnostics.is_empty() {
            let mut blocks = format!("# config_hash={hash:016x}\n");
            for d in &report.diagnostics {
                let g: Vec<String> = d.subgradient.iter().map(|x| x.to_string()).collect();
                blocks.push_str(&format!(
                    "date={} iterations={} kkt_residual={} lambda={} ridge={} g=[{}]\n",
                    d.date,
                    d.iterations,
                    d.kkt_residual,
                    d.lagrange_mult,
                    d.ridge_applied,
                    g.join(",")
                ));
            }
            std::fs::write(
                out.join(format!("diagnostics_{}.txt", report.strategy)),
                blocks,
            )?;
        }
        lines.push_str(&report.strategy);
        match &report.metrics {
            Some(m) => {
                for f in costfolio::backtest::Metrics::FIELDS {
                    lines.push_str(&format!(",{}", m.field(f).expect("known field")));
                }
            }
            None => {
                for _ in costfolio::backtest::Metrics::FIELDS {
                    lines.push(',');
                }
            }
        }
        lines.push('\n');
        println!("backtested {}", report.strategy);
    }
    let mut content = format!("# config_hash={hash:016x}\n");
    content.push_str(&lines);
    std::fs::write(out.join("backtest_report.csv"), content)?;
    Ok(())
}

pub fn cmd_sweep_beta(config: &Config, seed: u64) -> Result<()> {
    let out = ensure_out_dir(config)?;
    let hash = config.hash();
    let data = load_market(config, seed)?;
    let estimators = config
        .str_list_or("estimators", &["sample", "lw"])
        .iter()
        .map(|s| match s.as_str() {
            "sample" => Ok(SweepEstimator::Sample),
            "lw" => Ok(SweepEstimator::LedoitWolf),
            other => Err(Error::Config(format!("unknown sweep estimator '{other}'"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let sweep_cfg = SweepConfig {
        estimators,
        cost_kind: match config.str_or("sweep_cost", "l2").as_str() {
            "l1" => CostKind::L1,
            "l2" => CostKind::L2,
            other => return Err(Error::Config(format!("field 'sweep_cost': '{other}'"))),
        },
        gamma: config.f64_or("gamma", 4.0)?,
        estimation_window: config.usize_or("estimation_window", 500)?,
        beta_grid_bp: config.f64_list_or("beta_grid_bp", &[0.0, 1.0, 10.0, 50.0, 100.0, 1000.0])?,
        beta_post_grid_bp: match config.opt_str("beta_post_grid_bp") {
            Some(_) => Some(config.f64_list_or("beta_post_grid_bp", &[])?),
            None => None,
        },
    };
    let rows = sweep_beta(&data.panel, &sweep_cfg)?;
    csv::write_sweep_csv(&out.join("sweep.csv"), &rows, hash)?;
    println!("wrote {} sweep rows to {}", rows.len(), out.display());
    Ok(())
}

pub fn cmd_pool(config: &Config, seed: u64) -> Result<()> {
    let out = ensure_out_dir(config)?;
    let hash = config.hash();
    let data = load_market(config, seed)?;
    let bt = backtest_config(config, seed)?;
    let models = bt.mixture_models.clone();
    let (day0, panel) = compute_score_panel(&data, &bt, &models)?;
    let model_names: Vec<String> = models.iter().map(|m| m.to_string()).collect();
    csv::write_scores_csv(
        &out.join("scores.csv"),
        panel.dates(),
        &model_names,
        panel.log_scores(),
        hash,
    )?;
    let series = pool_weight_series(day0, &panel, bt.pooling_window)?;
    let rows: Vec<(String, costfolio::pooling::PoolWeights)> = series
        .into_iter()
        .map(|(day, w)| (data.panel.dates()[day].clone(), w))
        .collect();
    csv::write_pool_weights_csv(&out.join("pool_weights.csv"), &rows, &model_names, hash)?;
    println!(
        "wrote scores for {} days and pool weights for {} days",
        panel.dates().len(),
        rows.len()
    );
    Ok(())
}

pub fn cmd_report(config: &Config, seed: u64) -> Result<()> {
    let out = ensure_out_dir(config)?;
    let hash = config.hash();
    let data = load_market(config, seed)?;
    let bt = backtest_config(config, seed)?;
    let strategies = strategies_from(config)?;
    let subset_size = config.usize_or("subset_size", data.panel.n_assets())?;
    let n_subsets = config.usize_or("n_subsets", 1)?;

    let mut summaries: Vec<BootstrapSummary> = Vec::new();
    for strategy in &strategies {
        let summary = bootstrap_run(strategy, &data, subset_size, n_subsets, &bt, seed)?;
        println!("bootstrapped {} ({n_subsets} subsets)", summary.strategy);
        summaries.push(summary);
    }
    csv::write_report_csv(&out.join("report.csv"), &summaries, hash)?;

    // Pairwise mean annual switching fees in basis points, paired by subset.
    let k = summaries.len();
    let mut fees = DMatrix::zeros(k, k);
    for to in 0..k {
        for from in 0..k {
            if to == from {
                continue;
            }
            let mut acc = 0.0;
            let mut count = 0usize;
            for s in 0..n_subsets {
                let fee = performance_fee(
                    &summaries[from].per_subset_net_returns[s],
                    &summaries[to].per_subset_net_returns[s],
                    bt.gamma,
                    1e-10,
                )?;
                acc += fee;
                count += 1;
            }
            fees[(to, from)] = acc / count as f64 * TRADING_DAYS_PER_YEAR * 1e4;
        }
    }
    let labels: Vec<String> = summaries.iter().map(|s| s.strategy.clone()).collect();
    csv::write_fees_csv(&out.join("fees.csv"), &labels, &fees, hash)?;
    println!("wrote report.csv and fees.csv to {}", out.display());
    Ok(())
}

/// Full pipeline: simulate/ingest, estimate, pool, backtest, bootstrap.
pub fn cmd_run(config: &Config, seed: u64) -> Result<()> {
    cmd_simulate_if_needed(config, seed)?;
    cmd_pool(config, seed)?;
    cmd_backtest(config, seed)?;
    cmd_report(config, seed)?;
    Ok(())
}

fn cmd_simulate_if_needed(config: &Config, seed: u64) -> Result<()> {
    if config.opt_str("returns_csv").is_none() {
        if !config.bool_or("simulate", false)? {
            return Err(Error::Config(
                "set either 'returns_csv' or 'simulate = true' (with simulator fields)".into(),
            ));
        }
        cmd_simulate(config, seed)?;
    }
    Ok(())
}
