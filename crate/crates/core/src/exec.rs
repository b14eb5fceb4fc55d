//! Data-parallel map helpers.
//!
//! Every parallel loop in this crate goes through [`map_indexed`]: work items
//! are independent, results are collected in index order, and any floating
//! point reduction over them happens sequentially afterwards. Under those
//! rules the `parallel` feature changes wall time only; outputs stay bitwise
//! identical to the sequential fallback (see the `par == seq` tests).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is enabled.
/// Results come back in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Always-sequential variant of [`map_indexed`]; the reference path used by
/// determinism tests and benchmarks.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let f = |i: usize| (i as f64).sin() * 1e3 + (i as f64).sqrt();
        let par = map_indexed(1000, f);
        let seq = map_indexed_seq(1000, f);
        assert_eq!(par.len(), seq.len());
        for (a, b) in par.iter().zip(seq.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
