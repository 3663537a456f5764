//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan out over rayon's pool;
//! without it they run on the calling thread. Results are always returned in
//! input order, so callers that reduce them sequentially get bit-identical
//! output regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Result;

/// `f` applied to every element, results in input order.
#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// `f(i)` for `i in 0..n`, results in index order.
#[cfg(feature = "parallel")]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Like [`map`] over fixed-size chunks. Chunk boundaries do not depend on the
/// pool size.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = items.len().div_ceil(chunk);
    map_range(n_chunks, |c| {
        let start = c * chunk;
        let end = (start + chunk).min(items.len());
        f(start, &items[start..end])
    })
}

/// Collects per-element results, surfacing the lowest-index error.
pub fn collect_ordered<R>(results: Vec<Result<R>>) -> Result<Vec<R>> {
    results.into_iter().collect()
}

/// Sums equally sized vectors in order. Deterministic for a fixed input order.
pub fn sum_vectors(parts: Vec<Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for part in parts {
        debug_assert_eq!(part.len(), dim);
        for (a, p) in acc.iter_mut().zip(&part) {
            *a += p;
        }
    }
    acc
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_in_order() {
        let items: Vec<usize> = (0..10).collect();
        let sums = map_chunks(&items, 3, |start, c| (start, c.iter().sum::<usize>()));
        assert_eq!(sums, vec![(0, 3), (3, 12), (6, 21), (9, 9)]);
    }

    #[test]
    fn first_error_wins() {
        use crate::error::Error;
        let r: Vec<Result<usize>> = vec![Ok(1), Err(Error::invalid("a")), Err(Error::invalid("b"))];
        let err = collect_ordered(r).unwrap_err();
        assert!(err.to_string().contains(": a"));
    }
}
