//! Composite covariance functions (linear + squared exponential + diagonal
//! isotropic) with log-space parameters and analytic derivatives.
//!
//! Raw parameter layout per term, in the order the terms appear in the spec:
//!
//! | term                 | raw parameters                   |
//! |----------------------|----------------------------------|
//! | linear               | `ln v`                           |
//! | squared exponential  | `ln amplitude`, `ln lengthscale` |
//! | diagonal isotropic   | `ln sigma^2`                     |
//!
//! `k(x, x') = v x.x' + a^2 exp(-|x - x'|^2 / 2l^2) + sigma^2 [same point]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelTerm {
    Linear,
    SquaredExponential,
    DiagonalIsotropic,
}

impl KernelTerm {
    pub fn n_params(self) -> usize {
        match self {
            KernelTerm::Linear | KernelTerm::DiagonalIsotropic => 1,
            KernelTerm::SquaredExponential => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Rows of a covariate matrix.
    FeatureRows,
    /// Latent component indices `1..=P`, one per row.
    IntegerIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub terms: Vec<KernelTerm>,
    pub input_kind: InputKind,
}

impl KernelSpec {
    pub fn new(terms: Vec<KernelTerm>, input_kind: InputKind) -> Result<Self> {
        let spec = Self { terms, input_kind };
        spec.validate()?;
        Ok(spec)
    }

    /// Linear + squared exponential + diagonal.
    pub fn composite(input_kind: InputKind) -> Self {
        Self {
            terms: vec![
                KernelTerm::Linear,
                KernelTerm::SquaredExponential,
                KernelTerm::DiagonalIsotropic,
            ],
            input_kind,
        }
    }

    pub fn diagonal(input_kind: InputKind) -> Self {
        Self {
            terms: vec![KernelTerm::DiagonalIsotropic],
            input_kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::InvalidArgument(
                "kernel needs at least one term".into(),
            ));
        }
        for (i, t) in self.terms.iter().enumerate() {
            if self.terms[..i].contains(t) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate kernel term {t:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.terms.iter().map(|t| t.n_params()).sum()
    }

    pub fn has_diagonal(&self) -> bool {
        self.terms.contains(&KernelTerm::DiagonalIsotropic)
    }

    fn offsets(&self) -> impl Iterator<Item = (KernelTerm, usize)> + '_ {
        self.terms.iter().scan(0usize, |off, &t| {
            let here = *off;
            *off += t.n_params();
            Some((t, here))
        })
    }

    fn check_params(&self, params: &KernelParams) -> Result<()> {
        if params.raw.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "kernel with {} parameters given {}",
                self.n_params(),
                params.raw.len()
            )));
        }
        if params
            .raw
            .iter()
            .any(|r| !r.is_finite() || r.exp() == 0.0 || !r.exp().is_finite())
        {
            return Err(Error::NonFinite(format!(
                "kernel parameters {:?}",
                params.raw
            )));
        }
        Ok(())
    }
}

/// Unconstrained kernel parameters; positive values are `exp(raw)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub raw: Vec<f64>,
}

impl KernelParams {
    pub fn new(raw: Vec<f64>) -> Self {
        Self { raw }
    }

    pub fn from_constrained(values: &[f64]) -> Self {
        Self {
            raw: values.iter().map(|v| v.ln()).collect(),
        }
    }

    pub fn constrained(&self) -> Vec<f64> {
        self.raw.iter().map(|r| r.exp()).collect()
    }
}

/// Column of latent component indices `1..=p`.
pub fn index_inputs(p: usize) -> Matrix {
    Matrix::from_fn(p, 1, |i, _| (i + 1) as f64)
}

fn sq_dist(a: &Matrix, i: usize, b: &Matrix, j: usize) -> f64 {
    (0..a.ncols())
        .map(|k| (a[(i, k)] - b[(j, k)]).powi(2))
        .sum()
}

fn dot(a: &Matrix, i: usize, b: &Matrix, j: usize) -> f64 {
    (0..a.ncols()).map(|k| a[(i, k)] * b[(j, k)]).sum()
}

/// Covariance between two input sets. The diagonal term only contributes
/// when both sets are the same.
pub fn kernel_eval(
    spec: &KernelSpec,
    params: &KernelParams,
    a: &Matrix,
    b: &Matrix,
) -> Result<Matrix> {
    let same = a.shape() == b.shape() && a == b;
    eval_inner(spec, params, a, b, same)
}

/// `k(X, X)` including the diagonal term.
pub fn kernel_self(spec: &KernelSpec, params: &KernelParams, x: &Matrix) -> Result<Matrix> {
    eval_inner(spec, params, x, x, true)
}

/// Cross-covariance between distinct point sets (no diagonal term).
pub fn kernel_cross(
    spec: &KernelSpec,
    params: &KernelParams,
    a: &Matrix,
    b: &Matrix,
) -> Result<Matrix> {
    eval_inner(spec, params, a, b, false)
}

/// Only the diagonal entries of `k(X, X)`.
pub fn kernel_self_diag(spec: &KernelSpec, params: &KernelParams, x: &Matrix) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    let p = params.constrained();
    let mut out = vec![0.0; x.nrows()];
    for (term, off) in spec.offsets() {
        for (i, o) in out.iter_mut().enumerate() {
            *o += match term {
                KernelTerm::Linear => p[off] * dot(x, i, x, i),
                KernelTerm::SquaredExponential => p[off] * p[off],
                KernelTerm::DiagonalIsotropic => p[off],
            };
        }
    }
    Ok(out)
}

fn eval_inner(
    spec: &KernelSpec,
    params: &KernelParams,
    a: &Matrix,
    b: &Matrix,
    same: bool,
) -> Result<Matrix> {
    spec.validate()?;
    spec.check_params(params)?;
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "kernel inputs with {} and {} features",
            a.ncols(),
            b.ncols()
        )));
    }
    let p = params.constrained();
    let mut k = Matrix::zeros(a.nrows(), b.nrows());
    for (term, off) in spec.offsets() {
        match term {
            KernelTerm::Linear => {
                let v = p[off];
                for i in 0..a.nrows() {
                    for j in 0..b.nrows() {
                        k[(i, j)] += v * dot(a, i, b, j);
                    }
                }
            }
            KernelTerm::SquaredExponential => {
                let amp2 = p[off] * p[off];
                let inv = 0.5 / (p[off + 1] * p[off + 1]);
                for i in 0..a.nrows() {
                    for j in 0..b.nrows() {
                        k[(i, j)] += amp2 * (-sq_dist(a, i, b, j) * inv).exp();
                    }
                }
            }
            KernelTerm::DiagonalIsotropic => {
                if same {
                    for i in 0..a.nrows() {
                        k[(i, i)] += p[off];
                    }
                }
            }
        }
    }
    if same {
        // exact symmetry regardless of accumulation order
        for i in 0..k.nrows() {
            for j in 0..i {
                let m = 0.5 * (k[(i, j)] + k[(j, i)]);
                k[(i, j)] = m;
                k[(j, i)] = m;
            }
        }
    }
    Ok(k)
}

/// `dK/d raw[param_index]` for `k(X, X)`, chain rule through `exp` included.
pub fn kernel_grad(
    spec: &KernelSpec,
    params: &KernelParams,
    inputs: &Matrix,
    param_index: usize,
) -> Result<Matrix> {
    spec.check_params(params)?;
    if param_index >= spec.n_params() {
        return Err(Error::InvalidArgument(format!(
            "parameter index {param_index} out of range for a kernel with {} parameters",
            spec.n_params()
        )));
    }
    let p = params.constrained();
    let n = inputs.nrows();
    let mut g = Matrix::zeros(n, n);
    for (term, off) in spec.offsets() {
        let local = match param_index.checked_sub(off) {
            Some(l) if l < term.n_params() => l,
            _ => continue,
        };
        match (term, local) {
            (KernelTerm::Linear, _) => {
                for i in 0..n {
                    for j in 0..n {
                        g[(i, j)] = p[off] * dot(inputs, i, inputs, j);
                    }
                }
            }
            (KernelTerm::SquaredExponential, l) => {
                let amp2 = p[off] * p[off];
                let ell2 = p[off + 1] * p[off + 1];
                for i in 0..n {
                    for j in 0..n {
                        let d2 = sq_dist(inputs, i, inputs, j);
                        let kij = amp2 * (-0.5 * d2 / ell2).exp();
                        g[(i, j)] = if l == 0 { 2.0 * kij } else { kij * d2 / ell2 };
                    }
                }
            }
            (KernelTerm::DiagonalIsotropic, _) => {
                for i in 0..n {
                    g[(i, i)] = p[off];
                }
            }
        }
    }
    Ok(g)
}

/// Variance of the diagonal term (0 if absent).
pub fn diag_variance(spec: &KernelSpec, params: &KernelParams) -> f64 {
    spec.offsets()
        .find(|(t, _)| *t == KernelTerm::DiagonalIsotropic)
        .map(|(_, off)| params.raw[off].exp())
        .unwrap_or(0.0)
}

/// `d diag_variance / d raw[param_index]`.
pub fn diag_variance_grad(spec: &KernelSpec, params: &KernelParams, param_index: usize) -> f64 {
    match spec
        .offsets()
        .find(|(t, _)| *t == KernelTerm::DiagonalIsotropic)
    {
        Some((_, off)) if off == param_index => params.raw[off].exp(),
        _ => 0.0,
    }
}
