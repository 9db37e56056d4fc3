//! Ordered parallel map with a sequential fallback.
//!
//! Training evaluates the pairs of a batch independently; with the
//! `parallel` feature the work fans out across a rayon pool, without it the
//! same code runs on one thread. Results always come back in input order,
//! and every reduction over them happens sequentially in that order, so the
//! two modes are bit-identical — a trained model does not depend on the
//! thread count.

/// Map `f` over `items`, returning results in input order.
#[cfg(feature = "parallel")]
pub fn map_ordered<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, returning results in input order.
#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    map_sequential(items, f)
}

/// The single-threaded twin of [`map_ordered`], always available; the bench
/// suite uses it as the baseline.
pub fn map_sequential<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}
