//! Chunked execution over disjoint output regions.
//!
//! Every parallel loop in this crate writes through these helpers. Work is
//! split over non-overlapping chunks of the output buffer and each chunk is
//! filled by a closure whose internal loop order is fixed, so the result is
//! bitwise identical whether chunks run on one thread or many. Reductions
//! never share an accumulator across chunks.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static ENABLED: AtomicBool = AtomicBool::new(true);

/// Runtime switch for the thread pool. No-op without the `parallel` feature.
/// The bench suite flips this to compare both paths in one build.
pub fn set_parallel(enabled: bool) {
    #[cfg(feature = "parallel")]
    ENABLED.store(enabled, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = enabled;
}

/// True when work will actually be distributed over threads.
pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        ENABLED.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Calls `f(i, chunk_i)` for every `chunk`-sized slice of `out`.
/// `out.len()` must be a multiple of `chunk`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    if is_parallel() {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
