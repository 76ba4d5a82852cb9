//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, index-parallel maps run on the current rayon
//! pool whenever it has more than one thread. Inside a single-thread pool, or
//! without the feature, the plain iterator path is taken. Every helper
//! collects results by index, so outputs never depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Result;

/// Number of worker threads the current context will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Runs `f` with internal parallelism limited to `threads` workers.
///
/// `threads == 0` means "use the default pool". Without the `parallel`
/// feature every value behaves like 1.
pub fn with_threads<R, F>(threads: usize, f: F) -> Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return Ok(f());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| crate::error::AlgmError::Argument(format!("cannot build thread pool: {e}")))?;
        Ok(pool.install(f))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(f())
    }
}

pub(crate) fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if n > 1 && rayon::current_num_threads() > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

pub(crate) fn map_slice<'a, S, T, F>(items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&'a S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if items.len() > 1 && rayon::current_num_threads() > 1 {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

pub(crate) fn map_slice_mut<S, T, F>(items: &mut [S], f: F) -> Vec<T>
where
    S: Send,
    T: Send,
    F: Fn(&mut S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if items.len() > 1 && rayon::current_num_threads() > 1 {
        return items.par_iter_mut().map(f).collect();
    }
    items.iter_mut().map(f).collect()
}
