//! Data-parallel helpers. With the `parallel` feature (default) work is spread
//! over the rayon pool unless the caller asks for [`Parallelism::Sequential`];
//! without it everything runs on the calling thread. Results always come back
//! in input order, so downstream reductions are identical in both modes.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    #[default]
    Parallel,
    Sequential,
}

impl Parallelism {
    /// Whether work will actually be spread across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, Fun>(mode: Parallelism, n: usize, f: Fun) -> Vec<R>
where
    R: Send,
    Fun: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, preserving order.
pub fn map<T, R, Fun>(mode: Parallelism, items: &[T], f: Fun) -> Vec<R>
where
    T: Sync,
    R: Send,
    Fun: Fn(&T) -> R + Sync + Send,
{
    map_range(mode, items.len(), |i| f(&items[i]))
}

/// Maps `f` over a mutable slice with each element's index, preserving order.
pub fn map_mut<T, R, Fun>(mode: Parallelism, items: &mut [T], f: Fun) -> Vec<R>
where
    T: Send,
    R: Send,
    Fun: Fn(usize, &mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items
            .par_iter_mut()
            .enumerate()
            .map(|(i, x)| f(i, x))
            .collect();
    }
    let _ = mode;
    items.iter_mut().enumerate().map(|(i, x)| f(i, x)).collect()
}
