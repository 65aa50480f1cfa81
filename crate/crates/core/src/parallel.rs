//! Data-parallel execution over fixed-size chunks.
//!
//! Work is split into chunks whose boundaries depend only on the problem
//! size, never on the thread count. Each chunk is processed sequentially and
//! the per-chunk results come back in chunk order, so reductions performed by
//! the caller are bit-identical between [`ExecMode::Sequential`] and
//! [`ExecMode::Parallel`].

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "HJBADP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// `Parallel` degrades to sequential execution when the crate is built
    /// without the `parallel` feature.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Splits `0..len` into consecutive ranges of at most `chunk` items.
pub fn chunk_ranges(len: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..len.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(len))
        .collect()
}

/// Applies `f` to every chunk of `0..len` and returns the results in chunk
/// order.
pub fn map_chunks<T, F>(mode: ExecMode, len: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges = chunk_ranges(len, chunk);
    #[cfg(feature = "parallel")]
    if mode.is_parallel() && ranges.len() > 1 {
        use rayon::prelude::*;
        return ranges.into_par_iter().map(f).collect();
    }
    let _ = mode;
    ranges.into_iter().map(f).collect()
}

/// Worker count requested through [`THREADS_ENV`], if any.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Sizes the global worker pool from [`THREADS_ENV`]. Has no effect when the
/// variable is unset, when the pool already exists, or without the
/// `parallel` feature.
pub fn init_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads_from_env() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
