//! Desk-scale engine for portfolio allocation under ex-ante transaction
//! costs: covariance estimation (sample, shrinkage, blocked realized
//! kernels), Bayesian predictive return distributions, optimal prediction
//! pooling, turnover-penalized optimization and a backtest harness with
//! bootstrap and utility-fee evaluation.

// Negated comparisons like `!(x > 0.0)` are deliberate throughout: they
// reject NaN where the clippy-preferred `x <= 0.0` would silently accept it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod covariance;
pub mod error;
pub mod exec;
pub mod io;
pub mod linalg;
pub mod market_data;
pub mod optimizer;
pub mod pooling;
pub mod predictive;
pub mod rng;
pub mod sweep;

pub use error::{Error, Result};

// Matrix types appear throughout the public API.
pub use nalgebra;
