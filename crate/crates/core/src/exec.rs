//! Dispatch layer between the rayon and sequential builds.
//!
//! Parallelism is applied only across independent output blocks (bank
//! members, gradient rows, sweep cells). No floating-point reduction ever
//! crosses a block boundary, so the `parallel` and sequential builds are
//! bit-identical.

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Applies `f(row_index, row)` to each `cols`-wide row of `buf`.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row_mut<F>(buf: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    buf.par_chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row_mut<F>(buf: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    for (i, row) in buf.chunks_mut(cols).enumerate() {
        f(i, row);
    }
}
