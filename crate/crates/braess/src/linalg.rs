// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative singular-value cutoff used for ranks, null spaces and
/// pseudo-inverses.
pub(crate) const RANK_RTOL: f64 = 1e-10;

/// Orthonormal basis (as columns) of the null space of `a` (rows × n).
///
/// Rows of `a` may be linearly dependent; an `a` without rows yields the
/// identity.
pub(crate) fn null_space(a: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // Pad to at least n rows so that the SVD returns the full right basis.
    let rows = a.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.rows_mut(0, a.nrows()).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.max();
    let cutoff = RANK_RTOL * smax.max(1.0);
    let null_rows: Vec<usize> = (0..n)
        .filter(|&i| svd.singular_values[i] <= cutoff)
        .collect();
    let mut z = DMatrix::zeros(n, null_rows.len());
    for (j, &i) in null_rows.iter().enumerate() {
        z.set_column(j, &v_t.row(i).transpose());
    }
    z
}

/// Moore–Penrose pseudo-inverse with a relative singular-value cutoff.
pub(crate) fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DMatrix::zeros(a.ncols(), a.nrows());
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = RANK_RTOL * smax.max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(cutoff)
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), a.nrows()))
}

/// Numerical rank of `a`.
pub(crate) fn rank(a: &DMatrix<f64>) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let s = a.clone().singular_values();
    let cutoff = RANK_RTOL * s.max().max(f64::MIN_POSITIVE);
    s.iter().filter(|&&v| v > cutoff).count()
}

/// 2-norm condition number (infinite for singular matrices).
pub(crate) fn condition_number(a: &DMatrix<f64>) -> f64 {
    let s = a.clone().singular_values();
    let smin = s.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        s.max() / smin
    }
}

/// Eigen-decomposition of the symmetric part of `a`.
pub(crate) fn sym_eigen(a: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

/// Solve `a·x = b` in the least-squares sense through the
/// pseudo-inverse, returning the solution and the relative residual.
pub(crate) fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64) {
    let p = pinv(a);
    let mut x = &p * b;
    // The SVD of badly scaled matrices can lose several digits; a few
    // refinement steps on the residual recover them.
    for _ in 0..3 {
        let r = b - a * &x;
        x += &p * r;
    }
    let r = a * &x - b;
    let scale = 1.0 + b.amax();
    (x, r.amax() / scale)
}

/// Vertical concatenation of two matrices with the same column count.
pub(crate) fn vstack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(top.ncols(), bottom.ncols());
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

/// Select the given rows of `a`.
pub(crate) fn select_rows(a: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), a.ncols());
    for (k, &r) in rows.iter().enumerate() {
        out.set_row(k, &a.row(r));
    }
    out
}

/// Infinity norm of a vector, 0 for an empty vector.
pub(crate) fn amax(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}
