//! Data-parallel map with a sequential fallback.
//!
//! Results always come back in input order, so callers get the same output
//! for every worker count as long as each item derives its own randomness.

use std::fmt;

/// How many workers a parallel stage may use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon's global pool.
    #[default]
    Parallel,
    /// A dedicated pool with this many threads.
    Threads(usize),
}

impl Execution {
    pub fn from_workers(workers: usize) -> Self {
        match workers {
            0 => Execution::Parallel,
            1 => Execution::Sequential,
            n => Execution::Threads(n),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self != Execution::Sequential
    }
}

impl fmt::Display for Execution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Execution::Sequential => write!(f, "sequential"),
            Execution::Parallel => write!(f, "parallel"),
            Execution::Threads(n) => write!(f, "{n} threads"),
        }
    }
}

/// `items.iter().enumerate().map(f).collect()`, possibly in parallel.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    if !exec.is_parallel() || items.len() < 2 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    imp::map(exec, items, f)
}

/// Like [`map`] for fallible work; returns the first error in input order.
pub fn try_map<T, R, E, F>(exec: Execution, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}

#[cfg(feature = "parallel")]
mod imp {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};

    use rayon::prelude::*;
    use rayon::ThreadPool;

    use super::Execution;

    fn pool(threads: usize) -> Arc<ThreadPool> {
        static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
        let mut pools = POOLS.get_or_init(Default::default).lock().expect("pool registry");
        pools
            .entry(threads)
            .or_insert_with(|| {
                Arc::new(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(threads)
                        .build()
                        .expect("thread pool"),
                )
            })
            .clone()
    }

    pub(super) fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        let run = || items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
        match exec {
            Execution::Threads(n) => pool(n).install(run),
            _ => run(),
        }
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    use super::Execution;

    pub(super) fn map<T, R, F>(_: Execution, items: &[T], f: F) -> Vec<R>
    where
        F: Fn(usize, &T) -> R,
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_every_execution() {
        let items: Vec<u64> = (0..257).collect();
        let want: Vec<u64> = items.iter().map(|x| x * x + 1).collect();
        for exec in [
            Execution::Sequential,
            Execution::Parallel,
            Execution::Threads(3),
        ] {
            assert_eq!(map(exec, &items, |_, x| x * x + 1), want, "{exec}");
        }
    }

    #[test]
    fn first_error_in_input_order_wins() {
        let items: Vec<i32> = (0..100).collect();
        let r: Result<Vec<i32>, i32> = try_map(Execution::Threads(4), &items, |_, &x| {
            if x % 30 == 29 {
                Err(x)
            } else {
                Ok(x)
            }
        });
        assert_eq!(r, Err(29));
    }

    #[test]
    fn worker_counts_map_to_modes() {
        assert_eq!(Execution::from_workers(1), Execution::Sequential);
        assert_eq!(Execution::from_workers(0), Execution::Parallel);
        assert_eq!(Execution::from_workers(8), Execution::Threads(8));
    }
}
