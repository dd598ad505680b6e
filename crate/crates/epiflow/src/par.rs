//! Row-parallel execution helper.
//!
//! Every hot loop in the crate walks image rows, writing disjoint output
//! slices, so one helper covers them all: with the `parallel` feature the
//! rows run on the rayon pool, otherwise sequentially. Outputs are identical
//! either way because rows never share state.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(row_index, row_slice)` to each `row_len` chunk of `data`.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    data.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(y, row)| f(y, row));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row<T, F>(data: &mut [T], row_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (y, row) in data.chunks_mut(row_len).enumerate() {
        f(y, row);
    }
}

/// Sequential variant, always available; benches compare it against the
/// parallel path.
pub(crate) fn for_each_row_seq<T, F>(data: &mut [T], row_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (y, row) in data.chunks_mut(row_len).enumerate() {
        f(y, row);
    }
}

/// Two-output variant: rows of `a` and `b` are processed in lockstep.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row2<A, B, F>(a: &mut [A], a_row: usize, b: &mut [B], b_row: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync,
{
    a.par_chunks_mut(a_row)
        .zip(b.par_chunks_mut(b_row))
        .enumerate()
        .for_each(|(y, (ra, rb))| f(y, ra, rb));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row2<A, B, F>(a: &mut [A], a_row: usize, b: &mut [B], b_row: usize, f: F)
where
    F: Fn(usize, &mut [A], &mut [B]),
{
    for (y, (ra, rb)) in a.chunks_mut(a_row).zip(b.chunks_mut(b_row)).enumerate() {
        f(y, ra, rb);
    }
}

pub(crate) fn for_each_row2_seq<A, B, F>(a: &mut [A], a_row: usize, b: &mut [B], b_row: usize, f: F)
where
    F: Fn(usize, &mut [A], &mut [B]),
{
    for (y, (ra, rb)) in a.chunks_mut(a_row).zip(b.chunks_mut(b_row)).enumerate() {
        f(y, ra, rb);
    }
}
