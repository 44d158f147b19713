//! Order-preserving parallel map over job indices.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs `f(0..n)` on up to `jobs` threads and returns results in index order.
/// Output never depends on `jobs`; with `jobs <= 1` everything runs inline.
pub fn map_jobs<T, F>(jobs: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}
