//! Dense reference implementation: materializes the full `NT x NT`
//! covariance and solves with a Cholesky factor. Small problems only.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::cholesky_jittered;
use crate::model::covariance::CovarianceParts;
use crate::tensor::{kron, kron_all, DenseTensor};
use crate::{Matrix, Vector};

/// Largest `N * T` the dense path accepts.
pub const NAIVE_LIMIT: usize = 4096;

const ORACLE_JITTER: f64 = 1e-8;

fn guard(size: usize) -> Result<()> {
    if size > NAIVE_LIMIT {
        Err(Error::TooLarge {
            size,
            limit: NAIVE_LIMIT,
        })
    } else {
        Ok(())
    }
}

/// `R ⊗ (⊗ D_i) + Omega ⊗ (⊗ Xi_i)` in row-major vec order (subject index
/// slowest).
pub fn dense_covariance(parts: &CovarianceParts) -> Result<Matrix> {
    let t: usize = parts.signal.iter().map(|m| m.nrows()).product();
    guard(parts.r.nrows() * t)?;
    let d = kron_all(&parts.signal);
    let xi = kron_all(&parts.noise);
    Ok(kron(&parts.r, &d) + kron(&parts.omega, &xi))
}

pub fn dense_lml(parts: &CovarianceParts, residual: &DenseTensor) -> Result<f64> {
    let k = dense_covariance(parts)?;
    if k.nrows() != residual.len() {
        return Err(Error::DimensionMismatch(format!(
            "covariance of size {} for {} residuals",
            k.nrows(),
            residual.len()
        )));
    }
    let chol = cholesky_jittered(&k, ORACLE_JITTER, "dense covariance")?;
    let y = Vector::from_column_slice(residual.data());
    let z = chol
        .l()
        .solve_lower_triangular(&y)
        .ok_or_else(|| Error::NotPositiveDefinite("triangular solve in dense likelihood".into()))?;
    let half_logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    let nt = residual.len() as f64;
    Ok(-0.5 * nt * (2.0 * PI).ln() - half_logdet - 0.5 * z.norm_squared())
}

/// Dense predictive mean and the diagonal of the predictive covariance.
pub fn dense_predict(
    parts: &CovarianceParts,
    residual: &DenseTensor,
    r_star: &Matrix,
    r_star_star: &Matrix,
) -> Result<(DenseTensor, DenseTensor)> {
    let k = dense_covariance(parts)?;
    let d = kron_all(&parts.signal);
    let n_star = r_star.nrows();
    guard(n_star * d.nrows())?;
    let k_star = kron(r_star, &d);
    let chol = cholesky_jittered(&k, ORACLE_JITTER, "dense covariance")?;
    let y = Vector::from_column_slice(residual.data());
    let alpha = chol.solve(&y);
    let mean = &k_star * alpha;
    let v = chol
        .l()
        .solve_lower_triangular(&k_star.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite("triangular solve in dense prediction".into()))?;
    let prior = kron(r_star_star, &d);
    let var: Vec<f64> = (0..k_star.nrows())
        .map(|i| prior[(i, i)] - v.column(i).norm_squared())
        .collect();
    let mut shape = vec![n_star];
    shape.extend(parts.signal.iter().map(|m| m.nrows()));
    Ok((
        DenseTensor::new(shape.clone(), mean.as_slice().to_vec())?,
        DenseTensor::new(shape, var)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_at_zero() {
        let parts = CovarianceParts {
            r: Matrix::zeros(2, 2),
            omega: Matrix::identity(2, 2),
            signal: vec![Matrix::zeros(3, 3)],
            noise: vec![Matrix::identity(3, 3)],
        };
        let zero = DenseTensor::zeros(&[2, 3]).unwrap();
        let l = dense_lml(&parts, &zero).unwrap();
        assert!((l + 3.0 * (2.0 * PI).ln()).abs() < 1e-12);
        let r = DenseTensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 1.0, 3.0]).unwrap();
        let l = dense_lml(&parts, &r).unwrap();
        let sq: f64 = r.data().iter().map(|v| v * v).sum();
        assert!((l - (-3.0 * (2.0 * PI).ln() - 0.5 * sq)).abs() < 1e-12);
    }

    #[test]
    fn size_guard() {
        let parts = CovarianceParts {
            r: Matrix::identity(65, 65),
            omega: Matrix::identity(65, 65),
            signal: vec![Matrix::identity(64, 64)],
            noise: vec![Matrix::identity(64, 64)],
        };
        assert!(matches!(
            dense_covariance(&parts),
            Err(Error::TooLarge { .. })
        ));
    }
}
