//! Symmetric eigendecomposition and the few dense factorizations the
//! efficient path needs.

use nalgebra::{Cholesky, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Relative floor applied to eigenvalues of covariances that get inverted.
pub const EIG_FLOOR_REL: f64 = 1e-10;

/// `A = U diag(S) U^T` with `S` non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SymEig {
    pub eigvecs: Matrix,
    pub eigvals: Vector,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.eigvecs.clone();
        for (j, &s) in self.eigvals.iter().enumerate() {
            scaled.column_mut(j).scale_mut(s);
        }
        scaled * self.eigvecs.transpose()
    }
}

/// `1e-10 * max(max_k |s_k|, 1)`.
pub fn eig_floor(eigvals: &[f64]) -> f64 {
    let m = eigvals.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    EIG_FLOOR_REL * m
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted
/// non-increasing and clamped from below at [`eig_floor`].
pub fn eig_sym(m: &Matrix) -> Result<SymEig> {
    let mut e = eig_sym_raw(m)?;
    let floor = eig_floor(e.eigvals.as_slice());
    e.eigvals.iter_mut().for_each(|s| *s = s.max(floor));
    Ok(e)
}

/// Same as [`eig_sym`] but clamps at zero instead of the floor; used for
/// PSD matrices whose eigenvalues are never inverted.
pub fn eig_psd(m: &Matrix) -> Result<SymEig> {
    let mut e = eig_sym_raw(m)?;
    e.eigvals.iter_mut().for_each(|s| *s = s.max(0.0));
    Ok(e)
}

fn eig_sym_raw(m: &Matrix) -> Result<SymEig> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "eigendecomposition of a non-square {}x{} matrix",
            n,
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to eig_sym".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let raw = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| raw.eigenvalues[b].total_cmp(&raw.eigenvalues[a]));
    let mut eigvecs = Matrix::zeros(n, n);
    let mut eigvals = Vector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        eigvals[dst] = raw.eigenvalues[src];
        let mut col = raw.eigenvectors.column(src).clone_owned();
        // deterministic sign: largest-magnitude entry positive
        let (imax, _) = col.iter().enumerate().fold((0, 0.0f64), |best, (i, v)| {
            if v.abs() > best.1 {
                (i, v.abs())
            } else {
                best
            }
        });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        eigvecs.set_column(dst, &col);
    }
    Ok(SymEig { eigvecs, eigvals })
}

/// Cholesky factor, retrying once with `jitter_rel * mean(diag)` added.
pub fn cholesky_jittered(m: &Matrix, jitter_rel: f64, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows().max(1);
    let mean_diag = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jittered = m.clone();
    for i in 0..m.nrows() {
        jittered[(i, i)] += jitter_rel * mean_diag;
    }
    Cholesky::new(jittered).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Max |A^T A - I| over the columns of `a`.
pub fn orthonormality_error(a: &Matrix) -> f64 {
    let g = a.transpose() * a;
    let mut worst = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

pub fn diag_of(m: &Matrix) -> Vec<f64> {
    (0..m.nrows().min(m.ncols())).map(|i| m[(i, i)]).collect()
}

/// `diag(A M A^T)` without forming the product.
pub fn diag_sandwich(a: &Matrix, m: &Matrix) -> Vec<f64> {
    let am = a * m;
    (0..a.nrows())
        .map(|i| {
            am.row(i)
                .iter()
                .zip(a.row(i).iter())
                .map(|(x, y)| x * y)
                .sum()
        })
        .collect()
}
