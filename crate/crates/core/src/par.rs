//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) per-item work runs on the rayon
//! global pool. Results are always collected in index order and reduced with
//! [`pairwise_sum`], so outputs are bit-identical for any thread count and
//! with the feature disabled.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// How per-item work is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

/// Forces every helper in this module onto the calling thread.
///
/// Intended for benchmarks and for checking that both paths agree.
pub fn set_execution(mode: Execution) {
    FORCE_SEQUENTIAL.store(mode == Execution::Sequential, Ordering::SeqCst);
}

/// Mode the helpers will use right now.
pub fn execution() -> Execution {
    if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst) {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// `(0..n).map(f)` collected in order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if execution() == Execution::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// `items.iter().map(f)` collected in order.
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    map_indexed(items.len(), |i| f(&items[i]))
}

/// Fallible variant of [`map_indexed`]; the first error by index wins.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Sum in a fixed binary-tree order, independent of how the values were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean via [`pairwise_sum`]; zero for an empty slice.
pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}
