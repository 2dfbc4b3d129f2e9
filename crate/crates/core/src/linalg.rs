//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factorization, retrying with a growing diagonal shift when the
/// matrix is numerically indefinite. The shift never exceeds `1e-8 * mean(diag)`.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows().max(1);
    let scale = (m.trace().abs() / n as f64).max(f64::MIN_POSITIVE);
    let mut shift = 1e-14 * scale;
    while shift <= 1e-8 * scale {
        let mut shifted = m.clone();
        for i in 0..m.nrows() {
            shifted[(i, i)] += shift;
        }
        if let Some(c) = Cholesky::new(shifted) {
            log::debug!("{what}: cholesky needed diagonal shift {shift:e}");
            return Ok(c);
        }
        shift *= 10.0;
    }
    Err(Error::Singular(what.to_string()))
}

/// `sum_i a_ij * b_ji`, i.e. `tr(A B)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Cumulative sum `T r` with `T` the lower-triangular matrix of ones.
pub fn cumsum(r: &DVector<f64>) -> DVector<f64> {
    let mut out = r.clone();
    for i in 1..out.len() {
        out[i] += out[i - 1];
    }
    out
}

/// Inverse of [`cumsum`]: first entry, then successive differences.
pub fn differences(beta: &DVector<f64>) -> DVector<f64> {
    let mut out = beta.clone();
    for i in (1..out.len()).rev() {
        out[i] -= beta[i - 1];
    }
    out
}

/// `M T` for a matrix `M` with `p` columns: reverse cumulative sums along rows.
pub fn right_mul_cumsum(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let p = m.ncols();
    for i in 0..m.nrows() {
        for k in (0..p.saturating_sub(1)).rev() {
            out[(i, k)] += out[(i, k + 1)];
        }
    }
    out
}

/// `T^T M T` for a square `p x p` matrix.
pub fn congruence_cumsum(m: &DMatrix<f64>) -> DMatrix<f64> {
    let right = right_mul_cumsum(m);
    right_mul_cumsum(&right.transpose()).transpose()
}

/// Principal submatrix on the given index set.
pub fn select_square(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

pub fn select_cols(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
}

pub fn select(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}
