//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the hot loops (vector scans,
//! benchmark scoring) fan out over rayon. Without it, or with
//! [`ExecMode::Sequential`], they run on the calling thread. Both paths
//! return results in input order, so callers stay deterministic.

/// Work items below this count are processed on one task.
const MIN_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// True if this build can actually run in parallel.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map_ordered<T, R, F>(items: &[T], mode: ExecMode, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().with_min_len(MIN_CHUNK).map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Same as [`map_ordered`] but each item may run long; no minimum chunk size.
pub fn map_ordered_coarse<T, R, F>(items: &[T], mode: ExecMode, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Runs `op` inside a pool of `threads` workers (or inline when sequential).
pub fn with_threads<R: Send>(threads: usize, op: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                return pool.install(op);
            }
        }
    }
    let _ = threads;
    op()
}
