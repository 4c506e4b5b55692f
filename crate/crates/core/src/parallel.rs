//! Order-preserving maps over independent work items.
//!
//! With the `parallel` feature enabled (the default), [`par_map`] runs on
//! the global rayon pool. Without it, [`par_map`] is the same as
//! [`seq_map`]. Results always come back in input order, so reductions over
//! them are deterministic whichever backend is used.

/// Sequential map, always available.
pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Data-parallel map that preserves input order.
#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Data-parallel map that preserves input order.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    seq_map(items, f)
}

/// True when [`par_map`] dispatches to a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
