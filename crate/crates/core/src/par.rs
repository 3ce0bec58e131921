//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature, work runs on a dedicated rayon pool of the
//! requested size. Results always come back in input order, so callers see
//! identical output whatever the thread count.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Parallelism {
    #[default]
    Sequential,
    Threads(usize),
}

impl Parallelism {
    pub fn from_threads(n: usize) -> Self {
        if n <= 1 {
            Self::Sequential
        } else {
            Self::Threads(n)
        }
    }

    /// Number of distinct worker indices `map_ordered` may pass.
    pub fn workers(self) -> usize {
        match self {
            Self::Sequential => 1,
            Self::Threads(n) if cfg!(feature = "parallel") => n.max(1),
            Self::Threads(_) => 1,
        }
    }
}

/// Applies `f(worker, item)` to every item and returns results in order.
/// `worker` is below `par.workers()` and identifies the executing thread,
/// so callers can keep per-worker resources.
pub fn map_ordered<T, R, F>(items: &[T], par: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match par {
        #[cfg(feature = "parallel")]
        Parallelism::Threads(n) if n > 1 => {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("thread pool");
            pool.install(|| items.par_iter().map(|item| f(current_worker(), item)).collect())
        }
        _ => items.iter().map(|item| f(0, item)).collect(),
    }
}

/// Index of the pool thread running the caller, 0 outside a pool.
pub fn current_worker() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_thread_index().unwrap_or(0)
    }
    #[cfg(not(feature = "parallel"))]
    {
        0
    }
}
