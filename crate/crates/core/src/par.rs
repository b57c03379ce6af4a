//! Rayon-backed data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature disabled every helper runs on the calling
//! thread. Results are always combined in input order so both builds
//! produce bit-identical outputs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Splits `items` into contiguous chunks, folds each chunk into a fresh
/// accumulator and merges the accumulators left to right.
///
/// Chunk boundaries depend only on `items.len()`, so integer-valued
/// accumulations are identical regardless of the worker count.
pub fn chunked_fold<T, A, I, F, M>(items: &[T], chunk: usize, init: I, fold: F, merge: M) -> A
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, &T) + Sync + Send,
    M: Fn(&mut A, A),
{
    let chunk = chunk.max(1);
    let chunks: Vec<&[T]> = items.chunks(chunk).collect();
    let partial = map(&chunks, |c| {
        let mut acc = init();
        for item in c.iter() {
            fold(&mut acc, item);
        }
        acc
    });
    let mut out = init();
    for p in partial {
        merge(&mut out, p);
    }
    out
}

pub fn current_num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
