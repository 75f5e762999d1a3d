//! Data-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! the same closures sequentially. Every helper preserves input order, so
//! results are identical between the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..len`, collecting results in index order.
pub fn map_range<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}

/// Maps `f` over a slice, collecting results in order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
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

/// Applies `f` to fixed-size chunks of `data` together with the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Sums per-chunk integer histograms of width `width` built by `fill`.
///
/// `fill(start, end, acc)` adds the contribution of items `start..end` into
/// `acc`. Chunks are combined by element-wise addition, which is exact for
/// integers, so the result does not depend on scheduling.
pub fn histogram<F>(len: usize, width: usize, chunk: usize, fill: F) -> Vec<u64>
where
    F: Fn(usize, usize, &mut [u64]) + Sync + Send,
{
    let chunk = chunk.max(1);
    let chunks = len.div_ceil(chunk);
    let run = |c: usize| {
        let mut acc = vec![0u64; width];
        let start = c * chunk;
        fill(start, (start + chunk).min(len), &mut acc);
        acc
    };
    let add = |mut a: Vec<u64>, b: Vec<u64>| {
        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        a
    };
    #[cfg(feature = "parallel")]
    {
        (0..chunks)
            .into_par_iter()
            .map(run)
            .reduce(|| vec![0u64; width], add)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..chunks).map(run).fold(vec![0u64; width], add)
    }
}

/// Number of worker threads the helpers will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
