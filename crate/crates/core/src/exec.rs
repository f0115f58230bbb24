//! Execution strategy for embarrassingly parallel loops.
//!
//! Monte Carlo replicates and bootstrap resamples are independent, so they
//! map cleanly onto a rayon pool. The `parallel` feature (on by default)
//! routes through rayon; without it the same code runs sequentially. Both
//! paths produce results in index order, and every random stream is keyed by
//! index, so the output is identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
use crate::error::Error;
use crate::error::Result;

/// Apply `f` to `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential version of [`map_indexed`], available regardless of features.
/// Benchmarks use it as the baseline the parallel path is compared against.
pub fn seq_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Fallible map over `0..n`. On failure the error from the smallest index is
/// returned so the outcome does not depend on scheduling.
pub fn try_map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let results: Vec<Result<T>> = map_indexed(n, f);
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

/// Run `body` on a rayon pool with `threads` workers (0 = library default).
/// Without the `parallel` feature the body just runs on the current thread.
pub fn with_threads<T, F>(threads: usize, body: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            Ok(body())
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(body))
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(body())
    }
}
