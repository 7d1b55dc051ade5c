//! Execution helpers: data-parallel maps with a sequential fallback.
//!
//! All parallel loops in this crate go through `par_map` / `try_par_map` so
//! that results are collected in input order and every reduction is
//! deterministic regardless of thread count. Building without the `parallel`
//! feature swaps in plain sequential iteration with identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Result;

/// Maps `f` over `items`, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Fallible variant of [`par_map`]; returns the first error in input order.
#[cfg(feature = "parallel")]
pub fn try_par_map<T, U, F>(items: Vec<T>, f: F) -> Result<Vec<U>>
where
    T: Send,
    U: Send,
    F: Fn(T) -> Result<U> + Sync + Send,
{
    let results: Vec<Result<U>> = items.into_par_iter().map(f).collect();
    results.into_iter().collect()
}

#[cfg(not(feature = "parallel"))]
pub fn try_par_map<T, U, F>(items: Vec<T>, f: F) -> Result<Vec<U>>
where
    F: Fn(T) -> Result<U>,
{
    items.into_iter().map(f).collect()
}

/// Sums a slice by pairwise recursion. The summation tree depends only on the
/// slice length, so totals are bit-identical however the terms were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}
