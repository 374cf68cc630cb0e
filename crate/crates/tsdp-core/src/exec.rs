//! Data-parallel map helpers.
//!
//! The hot loops (batched forward passes, attack-cell sweeps) are shaped as
//! index maps over independent items. With the `parallel` feature (default)
//! they fan out over rayon; without it they run sequentially. Results are
//! always collected in index order, so both paths produce identical output.

/// Map `f` over `0..n`, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn map_indexed<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F: Fn(usize) -> U>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}

/// Sequential reference path, kept unconditionally for benchmarking the
/// parallel speedup against the exact same closure.
pub fn map_indexed_seq<U, F: Fn(usize) -> U>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}
