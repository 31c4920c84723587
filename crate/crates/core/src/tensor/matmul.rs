//! Matrix products in the three orientations backprop needs.
//!
//! Each product parallelizes over output rows; the accumulation order within
//! one output element never depends on the thread count. The `*_seq` variants
//! are always compiled and are what the `parallel` paths fall back to; the
//! bench suite compares the two.

use super::{axpy, dot, Matrix};
use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `A (m×k) · B (k×n) -> m×n`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul", a.cols(), b.rows())?;
    let mut c = Matrix::zeros(a.rows(), b.cols());
    mm_dispatch(a, b, &mut c);
    Ok(c)
}

/// Sequential `matmul`, bit-identical to the parallel path.
pub fn matmul_seq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul", a.cols(), b.rows())?;
    let mut c = Matrix::zeros(a.rows(), b.cols());
    for (r, c_row) in c_rows_mut(&mut c).enumerate() {
        mm_row(a.row(r), b, c_row);
    }
    Ok(c)
}

/// `Aᵀ (k×m) · B from A (m×k), B (m×n) -> k×n`.
///
/// This is the `xᵀ·upstream` product that produces weight gradients.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul_at", a.rows(), b.rows())?;
    let mut c = Matrix::zeros(a.cols(), b.cols());
    at_dispatch(a, b, &mut c);
    Ok(c)
}

pub fn matmul_at_seq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul_at", a.rows(), b.rows())?;
    let mut c = Matrix::zeros(a.cols(), b.cols());
    for (i, c_row) in c_rows_mut(&mut c).enumerate() {
        at_row(i, a, b, c_row);
    }
    Ok(c)
}

/// `A (m×n) · Bᵀ from B (p×n) -> m×p`.
///
/// This is the `upstream·Wᵀ` product that backpropagates to inputs.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul_bt", a.cols(), b.cols())?;
    let mut c = Matrix::zeros(a.rows(), b.rows());
    bt_dispatch(a, b, &mut c);
    Ok(c)
}

pub fn matmul_bt_seq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul_bt", a.cols(), b.cols())?;
    let mut c = Matrix::zeros(a.rows(), b.rows());
    for (r, c_row) in c_rows_mut(&mut c).enumerate() {
        bt_row(a.row(r), b, c_row);
    }
    Ok(c)
}

fn check_inner(op: &'static str, a_inner: usize, b_inner: usize) -> Result<()> {
    if a_inner != b_inner {
        return Err(Error::shape(
            op,
            format!("inner dims equal ({a_inner})"),
            format!("{b_inner}"),
        ));
    }
    Ok(())
}

fn c_rows_mut(c: &mut Matrix) -> std::slice::ChunksMut<'_, f32> {
    let n = c.cols();
    c.as_mut_slice().chunks_mut(n.max(1))
}

/// One output row of `A·B`: `c_row = Σ_k a_row[k] · b.row(k)`.
#[inline]
fn mm_row(a_row: &[f32], b: &Matrix, c_row: &mut [f32]) {
    for (k, &aik) in a_row.iter().enumerate() {
        axpy(c_row, aik, b.row(k));
    }
}

/// Output row `i` of `Aᵀ·B`: `c_row = Σ_r a[r,i] · b.row(r)`.
#[inline]
fn at_row(i: usize, a: &Matrix, b: &Matrix, c_row: &mut [f32]) {
    for r in 0..a.rows() {
        axpy(c_row, a.get(r, i), b.row(r));
    }
}

/// One output row of `A·Bᵀ`: `c_row[p] = dot(a_row, b.row(p))`.
#[inline]
fn bt_row(a_row: &[f32], b: &Matrix, c_row: &mut [f32]) {
    for (p, out) in c_row.iter_mut().enumerate() {
        *out = dot(a_row, b.row(p));
    }
}

#[cfg(feature = "parallel")]
fn mm_dispatch(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    let (k, n) = (a.cols(), c.cols());
    c.as_mut_slice()
        .par_chunks_mut(n.max(1))
        .zip(a.as_slice().par_chunks(k.max(1)))
        .for_each(|(c_row, a_row)| mm_row(a_row, b, c_row));
}

#[cfg(not(feature = "parallel"))]
fn mm_dispatch(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    for (r, c_row) in c_rows_mut(c).enumerate() {
        mm_row(a.row(r), b, c_row);
    }
}

#[cfg(feature = "parallel")]
fn at_dispatch(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    let n = c.cols();
    c.as_mut_slice()
        .par_chunks_mut(n.max(1))
        .enumerate()
        .for_each(|(i, c_row)| at_row(i, a, b, c_row));
}

#[cfg(not(feature = "parallel"))]
fn at_dispatch(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    for (i, c_row) in c_rows_mut(c).enumerate() {
        at_row(i, a, b, c_row);
    }
}

#[cfg(feature = "parallel")]
fn bt_dispatch(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    let (k, p) = (a.cols(), c.cols());
    c.as_mut_slice()
        .par_chunks_mut(p.max(1))
        .zip(a.as_slice().par_chunks(k.max(1)))
        .for_each(|(c_row, a_row)| bt_row(a_row, b, c_row));
}

#[cfg(not(feature = "parallel"))]
fn bt_dispatch(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    for (r, c_row) in c_rows_mut(c).enumerate() {
        bt_row(a.row(r), b, c_row);
    }
}
