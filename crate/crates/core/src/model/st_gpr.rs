//! Mass-univariate baseline: an independent GP per output on the OLS
//! residuals, each with its own subject kernel and noise variance.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, KernelParams, KernelSpec, KernelTerm};
use crate::model::fixed::{fit_fixed_effect_with, predict_fixed};
use crate::model::Dataset;
use crate::optim::{self, OptimizerSettings};
use crate::tensor::DenseTensor;
use crate::{Matrix, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StGprSettings {
    pub optimizer: OptimizerSettings,
    pub ridge_fallback: bool,
}

impl Default for StGprSettings {
    fn default() -> Self {
        Self {
            optimizer: OptimizerSettings {
                max_iters: 200,
                ..OptimizerSettings::default()
            },
            ridge_fallback: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StGprResult {
    /// Full predictions, fixed effect included (`N* x T_1 x .. x T_D`).
    pub mean: DenseTensor,
    /// Predictive variance including the output's noise variance.
    pub var: DenseTensor,
    /// Raw parameters per output: kernel parameters then `ln sigma^2`.
    pub params: Vec<Vec<f64>>,
    /// Flat indices of outputs whose optimization failed. These fall back
    /// to the fixed-effect prediction and the residual sample variance.
    pub failed: Vec<usize>,
}

/// `(kernel parameters + 1) * T`.
pub fn st_gpr_parameter_count(kernel: &KernelSpec, n_outputs: usize) -> usize {
    (kernel.n_params() + 1) * n_outputs
}

/// Log-marginal likelihood of one output and its gradient over raw
/// parameters (kernel parameters, then `ln sigma^2`).
pub fn single_output_lml(
    kernel: &KernelSpec,
    x: &Matrix,
    y: &[f64],
    raw: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let np = kernel.n_params();
    let (kp, noise) = split(kernel, raw)?;
    let n = x.nrows();
    let mut k = kernels::kernel_self(kernel, &kp, x)?;
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let chol = k
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("single-output covariance".into()))?;
    let yv = Vector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let value = -0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * logdet - 0.5 * yv.dot(&alpha);
    if !value.is_finite() {
        return Err(Error::NonFinite("single-output likelihood".into()));
    }
    let kinv = chol.inverse();
    let w = &alpha * alpha.transpose() - kinv;
    let mut grad = Vec::with_capacity(np + 1);
    for p in 0..np {
        let dk = kernels::kernel_grad(kernel, &kp, x, p)?;
        grad.push(0.5 * w.component_mul(&dk).sum());
    }
    grad.push(0.5 * noise * w.trace());
    Ok((value, grad))
}

fn split(kernel: &KernelSpec, raw: &[f64]) -> Result<(KernelParams, f64)> {
    let np = kernel.n_params();
    if raw.len() != np + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} raw parameters for a single-output GP with {}",
            raw.len(),
            np + 1
        )));
    }
    let noise = raw[np].exp();
    if !noise.is_finite() || noise <= 0.0 {
        return Err(Error::NonFinite("single-output noise variance".into()));
    }
    Ok((KernelParams::new(raw[..np].to_vec()), noise))
}

/// Predictive mean and variance (noise included) of one output.
pub fn single_output_predict(
    kernel: &KernelSpec,
    x: &Matrix,
    y: &[f64],
    x_star: &Matrix,
    raw: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (kp, noise) = split(kernel, raw)?;
    let mut k = kernels::kernel_self(kernel, &kp, x)?;
    for i in 0..x.nrows() {
        k[(i, i)] += noise;
    }
    let chol = k
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("single-output covariance".into()))?;
    let k_star = kernels::kernel_cross(kernel, &kp, x_star, x)?;
    let alpha = chol.solve(&Vector::from_column_slice(y));
    let mean = &k_star * alpha;
    let v = chol
        .l()
        .solve_lower_triangular(&k_star.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite("single-output triangular solve".into()))?;
    let prior = kernels::kernel_self_diag(kernel, &kp, x_star)?;
    let var = prior
        .iter()
        .enumerate()
        .map(|(i, p)| (p - v.column(i).norm_squared()).max(0.0) + noise)
        .collect();
    Ok((mean.as_slice().to_vec(), var))
}

fn initial_raw(kernel: &KernelSpec, f: usize, var: f64) -> Vec<f64> {
    let share = (var / (kernel.terms.len() as f64 + 1.0)).max(1e-12);
    let mut raw = Vec::with_capacity(kernel.n_params() + 1);
    for t in &kernel.terms {
        match t {
            KernelTerm::Linear => raw.push((share / f as f64).ln()),
            KernelTerm::SquaredExponential => {
                raw.push(0.5 * share.ln());
                raw.push(0.5 * (f as f64).ln());
            }
            KernelTerm::DiagonalIsotropic => raw.push(share.ln()),
        }
    }
    raw.push(share.ln());
    raw
}

/// Fit one GP per output on the OLS residuals and predict at `x_star`.
pub fn st_gpr_fit_predict(
    d: &Dataset,
    x_star: &Matrix,
    kernel: &KernelSpec,
    settings: &StGprSettings,
) -> Result<StGprResult> {
    kernel.validate()?;
    if kernel.input_kind != kernels::InputKind::FeatureRows {
        return Err(Error::InvalidArgument(
            "the subject kernel takes covariate rows".into(),
        ));
    }
    if x_star.ncols() != d.x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} test covariates, {} training covariates",
            x_star.ncols(),
            d.x.ncols()
        )));
    }
    let n = d.n_subjects();
    if n < 2 {
        return Err(Error::InsufficientData(
            "need at least two training subjects".into(),
        ));
    }
    let a = fit_fixed_effect_with(&d.x, &d.y, settings.ridge_fallback)?;
    let residual = d.y.sub(&predict_fixed(&d.x, &a)?)?;
    let fixed_star = predict_fixed(x_star, &a)?;
    let t: usize = d.extents().iter().product();
    let resid = Matrix::from_row_slice(n, t, residual.data());
    let f = d.x.ncols();

    let per_output: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, bool)> = (0..t)
        .into_par_iter()
        .map(|j| {
            let y: Vec<f64> = resid.column(j).iter().copied().collect();
            let var = y.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let raw0 = initial_raw(kernel, f, var);
            let fitted = optim::minimize(
                |raw| {
                    let (v, g) = single_output_lml(kernel, &d.x, &y, raw)?;
                    Ok((-v, g.into_iter().map(|x| -x).collect()))
                },
                &raw0,
                &settings.optimizer,
            )
            .and_then(|r| {
                let (m, v) = single_output_predict(kernel, &d.x, &y, x_star, &r.x)?;
                Ok((m, v, r.x))
            });
            match fitted {
                Ok((m, v, raw)) => (m, v, raw, false),
                Err(e) => {
                    log::warn!("output {j}: single-output fit failed: {e}");
                    let ns = x_star.nrows();
                    (
                        vec![0.0; ns],
                        vec![var.max(f64::MIN_POSITIVE); ns],
                        raw0,
                        true,
                    )
                }
            }
        })
        .collect();

    let ns = x_star.nrows();
    let mut mean = fixed_star;
    let mut var = DenseTensor::zeros(mean.shape())?;
    let mut params = Vec::with_capacity(t);
    let mut failed = Vec::new();
    for (j, (m, v, raw, bad)) in per_output.into_iter().enumerate() {
        for i in 0..ns {
            mean.data_mut()[i * t + j] += m[i];
            var.data_mut()[i * t + j] = v[i];
        }
        params.push(raw);
        if bad {
            failed.push(j);
        }
    }
    Ok(StGprResult {
        mean,
        var,
        params,
        failed,
    })
}
