//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Parallelism::Rayon`] fans work out
//! over the rayon pool; without it every call runs sequentially. Results are
//! always returned in input order, so reductions over them are deterministic.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    /// True when this build can actually run work in parallel.
    pub fn available() -> bool {
        cfg!(feature = "parallel")
    }
}

pub fn map_range<R, F>(mode: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

pub fn map<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_range(mode, items.len(), |i| f(&items[i]))
}
