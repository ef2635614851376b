// SPDX-License-Identifier: Apache-2.0

//! Data-parallel helpers.
//!
//! Every helper returns results in input order, so any reduction done over
//! the output afterwards sees the same summation order no matter how many
//! threads ran. With the `parallel` feature disabled, or with
//! [`Parallelism::Sequential`], everything runs on the calling thread.

/// Execution strategy for the data-parallel loops in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[default]
    Sequential,
    /// Uses the current rayon pool. Falls back to sequential without the
    /// `parallel` feature.
    Rayon,
}

impl Parallelism {
    /// `Rayon` when compiled with the `parallel` feature, else `Sequential`.
    pub fn available() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Rayon
        } else {
            Parallelism::Sequential
        }
    }

    /// Ordered map over a slice.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    /// Ordered map over `0..n`.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Ordered map over fixed-size chunks of a slice.
    pub fn map_chunks<T, R, F>(self, items: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&[T]) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                items.par_chunks(chunk).map(f).collect()
            }
            _ => items.chunks(chunk).map(f).collect(),
        }
    }
}

/// Worker count requested through `EASA_THREADS`; defaults to 1.
pub fn threads_from_env() -> usize {
    std::env::var("EASA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Sizes the global rayon pool to `threads` and returns the matching
/// strategy. One thread means sequential execution.
pub fn configure(threads: usize) -> Parallelism {
    if threads <= 1 {
        return Parallelism::Sequential;
    }
    #[cfg(feature = "parallel")]
    {
        // the pool can only be built once per process; later calls keep it
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Parallelism::available()
}
