//! Data-parallel dispatch.
//!
//! Parallelism is only ever applied across disjoint output partitions (rows
//! of a matmul, rows of a softmax, samples of a dataset); the arithmetic for
//! each element runs in a fixed order on exactly one thread. Reductions are
//! folded sequentially in index order. Consequently the `parallel` feature
//! changes wall-clock time but never a single output bit, and results are
//! identical between the rayon build and the sequential fallback.

use std::cell::Cell;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work-size floor below which the rayon path is skipped.
const MIN_PAR_ELEMS: usize = 16 * 1024;

thread_local! {
    static FORCE_SEQ: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with parallel dispatch disabled on this thread. Exists so the
/// bench suite can compare the rayon path against the sequential one inside
/// a single build.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    FORCE_SEQ.with(|c| {
        let prev = c.replace(true);
        let out = f();
        c.set(prev);
        out
    })
}

#[inline]
fn parallel_allowed(total_elems: usize) -> bool {
    if total_elems < MIN_PAR_ELEMS {
        return false;
    }
    if FORCE_SEQ.with(|c| c.get()) {
        return false;
    }
    cfg!(feature = "parallel")
}

/// Apply `f` to each `row_len`-sized chunk of `out`. `f(i, row)` must write
/// the row as a pure function of the index and captured inputs.
pub fn for_each_row(out: &mut [f64], row_len: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    if row_len == 0 || out.is_empty() {
        return;
    }
    debug_assert_eq!(out.len() % row_len, 0);
    #[cfg(feature = "parallel")]
    if parallel_allowed(out.len()) {
        out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = parallel_allowed(out.len());
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Map `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<T: Send>(n: usize, per_item_cost: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    if parallel_allowed(n.saturating_mul(per_item_cost.max(1))) {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = per_item_cost;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_match_sequential_exactly() {
        let n_rows = 300;
        let row_len = 128;
        let fill = |i: usize, row: &mut [f64]| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((i * 31 + j) as f64).sin();
            }
        };
        let mut a = vec![0.0; n_rows * row_len];
        let mut b = vec![0.0; n_rows * row_len];
        for_each_row(&mut a, row_len, fill);
        sequential(|| for_each_row(&mut b, row_len, fill));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(10_000, 16, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * 2));
    }
}
