//! Voxelwise ordinary least squares for the fixed effect.

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;
use crate::Matrix;

/// Relative eigenvalue cut below which `X^T X` counts as singular.
const RANK_TOL: f64 = 1e-12;

/// Solve `X A_(0) = Y_(0)` in the least-squares sense for every output at
/// once. A rank-deficient design gets a ridge of `1e-8 tr(X^T X) / F` when
/// `ridge_fallback` is set and is an error otherwise.
pub fn fit_fixed_effect_with(
    x: &Matrix,
    y: &DenseTensor,
    ridge_fallback: bool,
) -> Result<DenseTensor> {
    let (n, t) = y.split_leading();
    let f = x.ncols();
    if x.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} covariate rows for {n} subjects",
            x.nrows()
        )));
    }
    if f == 0 {
        return Err(Error::InvalidArgument(
            "design needs at least one covariate".into(),
        ));
    }
    let mut xtx = x.transpose() * x;
    let eig = eig_raw_extremes(&xtx)?;
    let condition = if eig.1 > 0.0 {
        eig.0 / eig.1
    } else {
        f64::INFINITY
    };
    if n < f || eig.1 <= RANK_TOL * eig.0 {
        if !ridge_fallback {
            return Err(Error::RankDeficient { condition });
        }
        let lambda = 1e-8 * xtx.trace() / f as f64;
        log::warn!("rank-deficient design (condition {condition:.3e}); adding ridge {lambda:.3e}");
        for i in 0..f {
            xtx[(i, i)] += lambda;
        }
    }
    let chol = Cholesky::new(xtx).ok_or(Error::RankDeficient { condition })?;
    let y0 = Matrix::from_row_slice(n, t, y.data());
    let a = chol.solve(&(x.transpose() * y0));
    let mut shape = y.shape().to_vec();
    shape[0] = f;
    let mut data = Vec::with_capacity(f * t);
    for i in 0..f {
        data.extend(a.row(i).iter());
    }
    DenseTensor::new(shape, data)
}

fn eig_raw_extremes(m: &Matrix) -> Result<(f64, f64)> {
    // unfloored extremes for the condition number
    let sym = nalgebra::SymmetricEigen::new((m + m.transpose()) * 0.5);
    if sym.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design Gram matrix".into()));
    }
    let max = sym.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = sym.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    Ok((max, min.max(0.0)))
}

/// `Y^ = X x_1 A`.
pub fn predict_fixed(x: &Matrix, a: &DenseTensor) -> Result<DenseTensor> {
    if x.ncols() != a.shape()[0] {
        return Err(Error::DimensionMismatch(format!(
            "{} covariates for a fixed effect over {}",
            x.ncols(),
            a.shape()[0]
        )));
    }
    a.mode_product(x, 0)
}
