//! Runtime switch between rayon data-parallel loops and a sequential
//! fallback.
//!
//! Parallel loops only ever map independent items and collect results in
//! input order; floating-point reductions are performed afterwards in index
//! order. Output is therefore bitwise identical in both modes, and the
//! sequential mode exists for the `--deterministic` CLI contract, for builds
//! without the `parallel` feature, and for benchmarking the speedup.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(true);

/// Enable or disable rayon at runtime. No-op when the `parallel` feature is
/// compiled out.
pub fn set_parallel(enabled: bool) {
    PARALLEL_ENABLED.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL_ENABLED.load(Ordering::Relaxed)
}

/// Map `f` over `items`, preserving input order in the output.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return items.par_iter().map(&f).collect();
    }
    items.iter().map(f).collect()
}

/// Map `f` over an index range, preserving index order in the output.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(&f).collect();
    }
    (0..n).map(f).collect()
}
