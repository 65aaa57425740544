//! Data-parallel map helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the indexed maps fan out over rayon's
//! global pool; without it they run sequentially. Results are collected in
//! index order either way, and every caller reduces over the collected vector
//! sequentially, so outputs are bit-identical regardless of worker count.
//!
//! `seq_map_range` is always available so benchmarks can compare both paths
//! inside one binary.

/// Map `f` over `0..n`, collecting results in index order (parallel when enabled).
#[cfg(feature = "parallel")]
pub fn par_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order (sequential build).
#[cfg(not(feature = "parallel"))]
pub fn par_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    seq_map_range(n, f)
}

/// Sequential reference implementation of [`par_map_range`].
pub fn seq_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Map `f` over a slice, collecting in order (parallel when enabled).
#[cfg(feature = "parallel")]
pub fn par_map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Map `f` over a slice, collecting in order (sequential build).
#[cfg(not(feature = "parallel"))]
pub fn par_map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}
