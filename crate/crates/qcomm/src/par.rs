//! Data-parallel map over instance indices.
//!
//! With the `parallel` feature (default) work fans out on the rayon pool;
//! without it the same call runs sequentially. Results always come back in
//! index order, so reports do not depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

/// Apply `f` to `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    seq_map(n, f)
}

/// Always-sequential variant, kept callable for benchmarking the two paths
/// against each other.
pub fn seq_map<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_are_in_index_order() {
        let squares = par_map(100, |i| i * i);
        assert_eq!(squares, seq_map(100, |i| i * i));
    }
}
