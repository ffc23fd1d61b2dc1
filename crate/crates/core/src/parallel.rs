//! Order-preserving parallel map on a pool of fixed size.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Applies `f` to every item on `workers` threads (0 means one per core).
/// Results come back in input order, so output never depends on scheduling.
pub fn par_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if workers == 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}
