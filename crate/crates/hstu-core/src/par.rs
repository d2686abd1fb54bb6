//! Execution strategy for batch-level loops.
//!
//! Per-sequence forwards/backwards, per-rank sampling decisions, and per-row
//! quantization are all embarrassingly parallel. Each such loop takes an
//! [`Execution`] so callers (and the bench suite) can run the same code both
//! ways. With the `parallel` feature disabled, rayon is not compiled in and
//! `Execution::Parallel` silently degrades to the sequential loop.
//!
//! Outputs are collected in index order, so results are bitwise identical
//! across strategies and thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Plain in-order loop on the calling thread.
    Sequential,
    /// rayon work-stealing pool (requires the `parallel` feature).
    #[default]
    Parallel,
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Parallel => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

/// Fallible variant of [`map_indexed`]; the first error (by index) wins.
pub fn try_map_indexed<T, E, F>(exec: Execution, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Parallel => {
            #[cfg(feature = "parallel")]
            {
                // Collect everything, then surface the lowest-index error so
                // behavior matches the sequential path deterministically.
                let results: Vec<Result<T, E>> = (0..n).into_par_iter().map(f).collect();
                results.into_iter().collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}
