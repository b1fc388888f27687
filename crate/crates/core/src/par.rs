//! Data-parallel helpers. With the `parallel` feature these run on rayon;
//! without it they are plain sequential loops. Work is always split the same
//! way, so both builds produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(chunk_index, chunk)` over fixed-size mutable chunks of `data`.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Same as [`for_each_chunk_mut`] over two equally chunked buffers.
pub fn for_each_chunk_mut2<F>(a: &mut [f64], chunk_a: usize, b: &mut [f64], chunk_b: usize, f: F)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(chunk_a)
        .zip(b.par_chunks_mut(chunk_b))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(chunk_a)
        .zip(b.chunks_mut(chunk_b))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    return (0..n).into_par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    return (0..n).map(f).collect();
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
