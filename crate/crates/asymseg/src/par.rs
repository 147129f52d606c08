//! Deterministic data-parallel helpers.
//!
//! All hot loops go through these so that the `parallel` feature (rayon)
//! and the sequential fallback produce bit-identical floating-point
//! results: work is split into fixed-size chunks and partial results are
//! combined in chunk order, independent of thread count.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed chunk length for reductions and fills. Changing this changes
/// floating-point summation order, so it is a constant, not a tunable.
pub(crate) const CHUNK: usize = 8192;

fn ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    (0..n)
        .step_by(chunk.max(1))
        .map(|start| start..(start + chunk).min(n))
        .collect()
}

/// Map fixed chunks of `0..n` to partial values, in chunk order.
/// The caller folds the returned vector sequentially.
pub(crate) fn partials<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Send + Sync,
{
    let ranges = ranges(n, CHUNK);
    #[cfg(feature = "parallel")]
    {
        ranges.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(f).collect()
    }
}

/// Fill `out` chunk by chunk; `f` receives the chunk's start index and
/// the chunk slice. Each element is written exactly once.
pub(crate) fn fill_chunks<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(i, s)| f(i * CHUNK, s));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(i, s)| f(i * CHUNK, s));
    }
}

/// Sum of `f` over `0..n`, chunked as above.
pub(crate) fn sum_f64<F>(n: usize, f: F) -> f64
where
    F: Fn(Range<usize>) -> f64 + Send + Sync,
{
    partials(n, f).into_iter().sum()
}
