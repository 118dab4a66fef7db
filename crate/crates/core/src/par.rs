//! Order-preserving data-parallel map with a sequential fallback.
//!
//! Multistart optimization, brute-force grids, scenario sweeps and controller
//! comparisons all map a pure function over independent items. With the
//! `parallel` feature the map runs on the rayon pool; without it, or with
//! [`Execution::Sequential`], it runs in the calling thread. Results are
//! always returned in input order, so both paths are bit-identical.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    pub fn map<T, R, F>(self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.into_par_iter().map(f).collect()
            }
            _ => items.into_iter().map(f).collect(),
        }
    }

    /// Whether this build can actually run items concurrently.
    pub fn is_concurrent(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}
