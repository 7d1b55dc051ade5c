//! Config-driven experiment runner: simulate markets, estimate covariance,
//! pool predictive models, backtest strategies and sweep cost levels.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Config;

#[derive(Parser)]
#[command(name = "costfolio", about = "Portfolio allocation under ex-ante transaction costs")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key-value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config's `seed` field.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for data-parallel stages (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory; overrides the config's `out_dir` field.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic market and write returns, ticks and ground truth.
    Simulate,
    /// Write rolling covariance estimates for the configured estimators.
    Estimate,
    /// Run the configured strategies once and write weight paths and metrics.
    Backtest,
    /// Ex-ante/ex-post transaction-cost sweep.
    SweepBeta,
    /// Predictive scores and optimal pooling weights.
    Pool,
    /// Bootstrap report and pairwise switching-fee matrix.
    Report,
    /// Full pipeline: simulate/ingest, pool, backtest, report.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    #[cfg(feature = "parallel")]
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("error: could not configure {workers} workers: {e}");
            return ExitCode::FAILURE;
        }
    }
    #[cfg(not(feature = "parallel"))]
    if let Some(workers) = cli.workers {
        if workers != 1 {
            eprintln!("warning: built without the 'parallel' feature; running sequentially");
        }
    }

    let mut config = match &cli.config {
        Some(path) => match Config::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: config {}: {e}", path.display());
                return ExitCode::FAILURE;
            }
        },
        None => {
            eprintln!("error: --config <path> is required");
            return ExitCode::FAILURE;
        }
    };
    if let Some(out) = &cli.out {
        config.set("out_dir", out.display().to_string());
    }
    if let Some(seed) = cli.seed {
        config.set("seed", seed.to_string());
    }
    let seed = match config.u64_or("seed", 0) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };

    let result = match cli.command {
        Command::Simulate => commands::cmd_simulate(&config, seed),
        Command::Estimate => commands::cmd_estimate(&config, seed),
        Command::Backtest => commands::cmd_backtest(&config, seed),
        Command::SweepBeta => commands::cmd_sweep_beta(&config, seed),
        Command::Pool => commands::cmd_pool(&config, seed),
        Command::Report => commands::cmd_report(&config, seed),
        Command::Run => commands::cmd_run(&config, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
