//! Assembly of the Kronecker-sum covariance
//! `K = R ⊗ (⊗ B_i C_i B_i^T) + Omega ⊗ (⊗ Xi_i)` and its joint
//! diagonalization.
//!
//! The noise mode covariance is `Xi_i = Lambda_i (K_i - d_i I) Lambda_i^T + d_i I`,
//! where `K_i` is the latent noise kernel on `1..=Q_i` and `d_i` the
//! variance of its diagonal term. With a square `Lambda_i` this is exactly
//! `Lambda_i K_i Lambda_i^T`; with `Q_i < T_i` the isotropic part also
//! covers the complement of the basis so `Xi_i` stays invertible.

use crate::error::{Error, Result};
use crate::factorization::FactorBasis;
use crate::kernels::{self, diag_variance, index_inputs, KernelParams};
use crate::linalg::{eig_psd, eig_sym, SymEig};
use crate::model::config::{KernelSet, ParamBlock, ParamLayout};
use crate::Matrix;

/// Everything about the model that stays fixed while kernel parameters move.
#[derive(Clone, Debug, PartialEq)]
pub struct GpStructure {
    pub kernels: KernelSet,
    pub bases_b: FactorBasis,
    pub bases_l: FactorBasis,
}

impl GpStructure {
    pub fn new(kernels: KernelSet, bases_b: FactorBasis, bases_l: FactorBasis) -> Result<Self> {
        kernels.validate()?;
        let d = kernels.n_modes();
        if bases_b.n_modes() != d || bases_l.n_modes() != d {
            return Err(Error::DimensionMismatch(format!(
                "{d} mode kernels but bases with {} and {} modes",
                bases_b.n_modes(),
                bases_l.n_modes()
            )));
        }
        if bases_b.extents() != bases_l.extents() {
            return Err(Error::DimensionMismatch(format!(
                "signal bases span {:?}, noise bases span {:?}",
                bases_b.extents(),
                bases_l.extents()
            )));
        }
        for i in 0..d {
            let q = bases_l.factors[i].ncols();
            if q < bases_l.factors[i].nrows() && !kernels.sigma[i].has_diagonal() {
                return Err(Error::InvalidArgument(format!(
                    "noise kernel {} needs a diagonal term for a reduced basis",
                    i + 1
                )));
            }
        }
        Ok(Self {
            kernels,
            bases_b,
            bases_l,
        })
    }

    pub fn layout(&self) -> ParamLayout {
        self.kernels.layout()
    }

    pub fn n_modes(&self) -> usize {
        self.kernels.n_modes()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.bases_b.extents()
    }

    pub fn n_outputs(&self) -> usize {
        self.extents().iter().product()
    }

    pub(crate) fn slice<'a>(&self, raw: &'a [f64], block: ParamBlock) -> &'a [f64] {
        let l = self.layout();
        let r = match block {
            ParamBlock::R => l.r,
            ParamBlock::Omega => l.omega,
            ParamBlock::C(i) => l.c[i].clone(),
            ParamBlock::Sigma(i) => l.sigma[i].clone(),
        };
        &raw[r]
    }

    pub(crate) fn params(&self, raw: &[f64], block: ParamBlock) -> KernelParams {
        KernelParams::new(self.slice(raw, block).to_vec())
    }

    /// Dense component matrices for the given raw parameters.
    pub fn parts(&self, x: &Matrix, raw: &[f64]) -> Result<CovarianceParts> {
        let layout = self.layout();
        if raw.len() != layout.total {
            return Err(Error::DimensionMismatch(format!(
                "{} raw parameters for a model with {}",
                raw.len(),
                layout.total
            )));
        }
        let r = kernels::kernel_self(&self.kernels.r, &self.params(raw, ParamBlock::R), x)?;
        let omega =
            kernels::kernel_self(&self.kernels.omega, &self.params(raw, ParamBlock::Omega), x)?;
        let mut signal = Vec::with_capacity(self.n_modes());
        let mut noise = Vec::with_capacity(self.n_modes());
        for i in 0..self.n_modes() {
            let b = &self.bases_b.factors[i];
            let c = kernels::kernel_self(
                &self.kernels.c[i],
                &self.params(raw, ParamBlock::C(i)),
                &index_inputs(b.ncols()),
            )?;
            signal.push(b * c * b.transpose());
            let l = &self.bases_l.factors[i];
            let sp = self.params(raw, ParamBlock::Sigma(i));
            let k = kernels::kernel_self(&self.kernels.sigma[i], &sp, &index_inputs(l.ncols()))?;
            noise.push(lift(l, &k, diag_variance(&self.kernels.sigma[i], &sp)));
        }
        Ok(CovarianceParts {
            r,
            omega,
            signal,
            noise,
        })
    }

    /// `dXi_i / d raw` or `dD_i / d raw` for one parameter of a mode kernel.
    pub(crate) fn mode_derivative(
        &self,
        raw: &[f64],
        block: ParamBlock,
        local: usize,
    ) -> Result<Matrix> {
        match block {
            ParamBlock::C(i) => {
                let b = &self.bases_b.factors[i];
                let dc = kernels::kernel_grad(
                    &self.kernels.c[i],
                    &self.params(raw, block),
                    &index_inputs(b.ncols()),
                    local,
                )?;
                Ok(b * dc * b.transpose())
            }
            ParamBlock::Sigma(i) => {
                let l = &self.bases_l.factors[i];
                let spec = &self.kernels.sigma[i];
                let p = self.params(raw, block);
                let dk = kernels::kernel_grad(spec, &p, &index_inputs(l.ncols()), local)?;
                Ok(lift(l, &dk, kernels::diag_variance_grad(spec, &p, local)))
            }
            _ => Err(Error::InvalidArgument("not a mode kernel block".into())),
        }
    }
}

/// `L (K - d I) L^T + d I`.
pub(crate) fn lift(l: &Matrix, k: &Matrix, d: f64) -> Matrix {
    let mut inner = k.clone();
    for j in 0..inner.nrows() {
        inner[(j, j)] -= d;
    }
    let mut out = l * inner * l.transpose();
    for j in 0..out.nrows() {
        out[(j, j)] += d;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceParts {
    /// Subject covariance of the signal, `N x N`.
    pub r: Matrix,
    /// Subject covariance of the noise, `N x N`.
    pub omega: Matrix,
    /// `D_i = B_i C_i B_i^T`, `T_i x T_i`.
    pub signal: Vec<Matrix>,
    /// `Xi_i`, `T_i x T_i`.
    pub noise: Vec<Matrix>,
}

/// Joint diagonalization `V K V^T = S_R~ ⊗ (⊗ S_C~_i) + I` with
/// `V = A_0 ⊗ A_1 ⊗ .. ⊗ A_D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectral {
    pub omega: SymEig,
    pub noise: Vec<SymEig>,
    pub r_tilde: SymEig,
    pub c_tilde: Vec<SymEig>,
    /// `A_0 = U_R~^T S_Omega^{-1/2} U_Omega^T`.
    pub a0: Matrix,
    /// `A_i = U_C~_i^T S_Xi_i^{-1/2} U_Xi_i^T`.
    pub a: Vec<Matrix>,
}

fn whitener(e: &SymEig) -> Matrix {
    let mut w = e.eigvecs.transpose();
    for (i, &s) in e.eigvals.iter().enumerate() {
        w.row_mut(i).scale_mut(1.0 / s.sqrt());
    }
    w
}

/// Eigendecomposition of `m / c` rescaled by `c`, where `c` is the mean
/// diagonal. The floor then acts relative to the matrix's own scale, so it
/// does not depend on how a Kronecker product distributes its overall scale.
fn eig_scaled(m: &Matrix) -> Result<SymEig> {
    let c = m.trace() / m.nrows().max(1) as f64;
    if !(c.is_finite() && c > 0.0) {
        return eig_sym(m);
    }
    let mut e = eig_sym(&(m / c))?;
    e.eigvals *= c;
    Ok(e)
}

impl CovarianceParts {
    pub fn spectral(&self) -> Result<Spectral> {
        let omega = eig_scaled(&self.omega)?;
        let w0 = whitener(&omega);
        let r_tilde = eig_psd(&(&w0 * &self.r * w0.transpose()))?;
        let a0 = r_tilde.eigvecs.transpose() * &w0;
        let mut noise = Vec::with_capacity(self.noise.len());
        let mut c_tilde = Vec::with_capacity(self.noise.len());
        let mut a = Vec::with_capacity(self.noise.len());
        for (xi, d) in self.noise.iter().zip(&self.signal) {
            let e = eig_scaled(xi)?;
            let w = whitener(&e);
            let ct = eig_psd(&(&w * d * w.transpose()))?;
            a.push(ct.eigvecs.transpose() * &w);
            noise.push(e);
            c_tilde.push(ct);
        }
        Ok(Spectral {
            omega,
            noise,
            r_tilde,
            c_tilde,
            a0,
            a,
        })
    }
}

impl Spectral {
    pub fn s_r(&self) -> &[f64] {
        self.r_tilde.eigvals.as_slice()
    }

    pub fn s_c(&self, i: usize) -> &[f64] {
        self.c_tilde[i].eigvals.as_slice()
    }

    /// `ln |Omega ⊗ (⊗ Xi_i)|` from the eigenvalues.
    pub fn noise_logdet(&self, n: usize, extents: &[usize]) -> f64 {
        let t: usize = extents.iter().product();
        let omega: f64 = self.omega.eigvals.iter().map(|s| s.ln()).sum();
        let modes: f64 = self
            .noise
            .iter()
            .zip(extents)
            .map(|(e, &ti)| (t / ti) as f64 * e.eigvals.iter().map(|s| s.ln()).sum::<f64>())
            .sum();
        t as f64 * omega + n as f64 * modes
    }
}
