//! Truncated higher-order SVD over the non-subject modes.

use crate::error::{Error, Result};
use crate::linalg::{eig_psd, orthonormality_error};
use crate::tensor::DenseTensor;
use crate::Matrix;

/// One orthonormal factor per data mode; factor `i` is `T_i x rank_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorBasis {
    pub factors: Vec<Matrix>,
}

impl FactorBasis {
    pub fn new(factors: Vec<Matrix>) -> Result<Self> {
        for (i, f) in factors.iter().enumerate() {
            if f.ncols() == 0 || f.ncols() > f.nrows() {
                return Err(Error::InvalidArgument(format!(
                    "factor {i} has rank {} for extent {}",
                    f.ncols(),
                    f.nrows()
                )));
            }
            let err = orthonormality_error(f);
            if err > 1e-8 {
                return Err(Error::InvalidArgument(format!(
                    "factor {i} is not orthonormal (max deviation {err:.2e})"
                )));
            }
        }
        Ok(Self { factors })
    }

    /// Identity factors (full rank) for the given extents.
    pub fn identity(extents: &[usize]) -> Self {
        Self {
            factors: extents.iter().map(|&t| Matrix::identity(t, t)).collect(),
        }
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.ncols()).collect()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    pub fn n_modes(&self) -> usize {
        self.factors.len()
    }

    /// `B_i B_i^T` for every mode.
    pub fn projectors(&self) -> Vec<Matrix> {
        self.factors.iter().map(|b| b * b.transpose()).collect()
    }
}

/// Leading left singular vectors of each non-subject matricization of `t`
/// (HOSVD). Column signs make the largest-magnitude entry positive.
pub fn tucker_bases(t: &DenseTensor, ranks: &[usize]) -> Result<FactorBasis> {
    let d = t.order().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
        Error::InvalidShape("tensor needs a subject mode and at least one data mode".into())
    })?;
    if ranks.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "{} ranks for {d} data modes",
            ranks.len()
        )));
    }
    let mut factors = Vec::with_capacity(d);
    for (i, &rank) in ranks.iter().enumerate() {
        let extent = t.shape()[i + 1];
        if rank == 0 || rank > extent {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} for mode {} of extent {extent}",
                i + 1
            )));
        }
        // left singular vectors of the unfolding = eigenvectors of its Gram matrix
        let gram = t.mode_gram(t, i + 1)?;
        let eig = eig_psd(&gram)?;
        factors.push(eig.eigvecs.columns(0, rank).clone_owned());
    }
    Ok(FactorBasis { factors })
}

/// Singular values of each non-subject matricization, non-increasing.
pub fn mode_singular_values(t: &DenseTensor) -> Result<Vec<Vec<f64>>> {
    (1..t.order())
        .map(|m| {
            let eig = eig_psd(&t.mode_gram(t, m)?)?;
            Ok(eig.eigvals.iter().map(|s| s.sqrt()).collect())
        })
        .collect()
}

/// `t x_2 B_1 B_1^T .. x_{D+1} B_D B_D^T`.
pub fn project_reconstruct(t: &DenseTensor, basis: &FactorBasis) -> Result<DenseTensor> {
    if t.order() != basis.n_modes() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "basis with {} modes for a tensor of order {}",
            basis.n_modes(),
            t.order()
        )));
    }
    for (i, f) in basis.factors.iter().enumerate() {
        if f.nrows() != t.shape()[i + 1] {
            return Err(Error::DimensionMismatch(format!(
                "factor {i} has {} rows, tensor mode {} has extent {}",
                f.nrows(),
                i + 1,
                t.shape()[i + 1]
            )));
        }
    }
    let mut out = t.clone();
    for (i, b) in basis.factors.iter().enumerate() {
        // project through the core to keep intermediates at rank size
        out = out
            .mode_product(&b.transpose(), i + 1)?
            .mode_product(b, i + 1)?;
    }
    Ok(out)
}
