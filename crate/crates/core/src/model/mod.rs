//! The mixed-effects tensor model: OLS fixed effect plus a Kronecker-sum
//! Gaussian process over the residuals, with low-rank mode covariances
//! `D_i ≈ B_i C_i B_i^T` (signal) and `Xi_i` built on `Lambda_i` (noise).

pub mod config;
pub mod covariance;
pub mod efficient;
pub mod fixed;
pub mod io;
pub mod naive;
pub mod st_gpr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{KernelSet, ModelConfig, ParamBlock, ParamLayout};
pub use covariance::{CovarianceParts, GpStructure, Spectral};
pub use efficient::{Evaluation, LmlTerms};
pub use fixed::{fit_fixed_effect_with, predict_fixed};
pub use io::{load_model, read_model, save_model, write_model};
pub use st_gpr::{st_gpr_fit_predict, st_gpr_parameter_count, StGprResult, StGprSettings};

use crate::error::{Error, Result};
use crate::factorization::{project_reconstruct, tucker_bases};
use crate::kernels::{self, KernelParams};
use crate::optim::{self, ExitReason, TraceEntry};
use crate::tensor::DenseTensor;
use crate::Matrix;

/// Covariates `X` (`N x F`) and data `Y` (`N x T_1 x .. x T_D`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: DenseTensor,
}

impl Dataset {
    pub fn new(x: Matrix, y: DenseTensor) -> Result<Self> {
        if y.order() < 2 {
            return Err(Error::InvalidShape(
                "data tensor needs a subject mode and at least one data mode".into(),
            ));
        }
        if x.nrows() != y.shape()[0] {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate rows for {} subjects",
                x.nrows(),
                y.shape()[0]
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "at least one covariate is required".into(),
            ));
        }
        Ok(Self { x, y })
    }

    pub fn n_subjects(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn extents(&self) -> &[usize] {
        &self.y.shape()[1..]
    }

    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        let x = Matrix::from_fn(rows.len(), self.x.ncols(), |i, j| self.x[(rows[i], j)]);
        Dataset::new(x, self.y.select_leading(rows)?)
    }
}

/// `A` of shape `(F, T_1, .., T_D)` with ridge fallback enabled.
pub fn fit_fixed_effect(d: &Dataset) -> Result<DenseTensor> {
    fit_fixed_effect_with(&d.x, &d.y, true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub trace: Vec<TraceEntry>,
    pub exit: ExitReason,
    pub iterations: usize,
    pub initial_lml: f64,
    pub final_lml: f64,
    pub grad_norm: f64,
}

/// A trained model. Immutable; [`FittedModel::with_params`] builds a new one.
#[derive(Clone, Debug)]
pub struct FittedModel {
    pub config: ModelConfig,
    pub fixed_effect: DenseTensor,
    pub structure: GpStructure,
    pub params: Vec<f64>,
    pub train_x: Matrix,
    pub train_residual: DenseTensor,
    pub report: Option<FitReport>,
    cache: Evaluation,
}

impl FittedModel {
    pub fn from_parts(
        config: ModelConfig,
        fixed_effect: DenseTensor,
        structure: GpStructure,
        params: Vec<f64>,
        train_x: Matrix,
        train_residual: DenseTensor,
    ) -> Result<Self> {
        if fixed_effect.shape()[1..] != train_residual.shape()[1..] {
            return Err(Error::DimensionMismatch(format!(
                "fixed effect {:?} vs residual {:?}",
                fixed_effect.shape(),
                train_residual.shape()
            )));
        }
        if fixed_effect.shape()[0] != train_x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "fixed effect over {} covariates, design has {}",
                fixed_effect.shape()[0],
                train_x.ncols()
            )));
        }
        let cache = efficient::evaluate(&structure, &train_x, &train_residual, &params)?;
        Ok(Self {
            config,
            fixed_effect,
            structure,
            params,
            train_x,
            train_residual,
            report: None,
            cache,
        })
    }

    /// Same model with different kernel parameters; the cache is rebuilt.
    pub fn with_params(&self, raw: Vec<f64>) -> Result<Self> {
        let cache =
            efficient::evaluate(&self.structure, &self.train_x, &self.train_residual, &raw)?;
        Ok(Self {
            params: raw,
            cache,
            report: None,
            ..self.clone()
        })
    }

    pub fn cache(&self) -> &Evaluation {
        &self.cache
    }

    /// Log-marginal likelihood of the training residuals.
    pub fn train_lml(&self) -> f64 {
        self.cache.terms.total()
    }

    pub fn n_train(&self) -> usize {
        self.train_x.nrows()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.structure.extents()
    }

    pub fn residual(&self, d: &Dataset) -> Result<DenseTensor> {
        if d.extents() != &self.extents()[..] {
            return Err(Error::DimensionMismatch(format!(
                "data extents {:?}, model extents {:?}",
                d.extents(),
                self.extents()
            )));
        }
        d.y.sub(&predict_fixed(&d.x, &self.fixed_effect)?)
    }

    /// `X* x_1 A`.
    pub fn predict_fixed(&self, x_star: &Matrix) -> Result<DenseTensor> {
        predict_fixed(x_star, &self.fixed_effect)
    }

    fn r_params(&self) -> KernelParams {
        self.structure.params(&self.params, ParamBlock::R)
    }

    fn check_inputs(&self, x_star: &Matrix) -> Result<()> {
        if x_star.ncols() != self.train_x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} test covariates, model was trained on {}",
                x_star.ncols(),
                self.train_x.ncols()
            )));
        }
        if x_star.nrows() == 0 {
            return Err(Error::InvalidArgument("no test subjects".into()));
        }
        Ok(())
    }

    /// `R*` between test and training subjects.
    pub fn r_star(&self, x_star: &Matrix) -> Result<Matrix> {
        kernels::kernel_eval(
            &self.structure.kernels.r,
            &self.r_params(),
            x_star,
            &self.train_x,
        )
    }
}

/// Efficient log-marginal likelihood of `d` under the model's parameters.
pub fn efficient_lml(d: &Dataset, model: &FittedModel) -> Result<f64> {
    let residual = model.residual(d)?;
    efficient::lml(&model.structure, &d.x, &residual, &model.params)
}

/// Dense oracle for [`efficient_lml`]; refuses `N T > 4096`.
pub fn naive_lml(d: &Dataset, model: &FittedModel) -> Result<f64> {
    let residual = model.residual(d)?;
    naive::dense_lml(&model.structure.parts(&d.x, &model.params)?, &residual)
}

/// Analytic gradient of [`efficient_lml`] over all raw parameters.
pub fn lml_gradient(d: &Dataset, model: &FittedModel) -> Result<Vec<f64>> {
    let residual = model.residual(d)?;
    let ev = efficient::evaluate(&model.structure, &d.x, &residual, &model.params)?;
    efficient::gradient(&model.structure, &d.x, &model.params, &ev)
}

/// Random-effect predictive mean (add [`FittedModel::predict_fixed`] for
/// full predictions).
pub fn predict_mean(model: &FittedModel, x_star: &Matrix) -> Result<DenseTensor> {
    model.check_inputs(x_star)?;
    efficient::predict_mean(model.cache(), &model.r_star(x_star)?)
}

/// Diagonal of the predictive covariance, computed in mini-batches of about
/// `batch_size` output entries.
pub fn predict_variance_diag(
    model: &FittedModel,
    x_star: &Matrix,
    batch_size: usize,
) -> Result<DenseTensor> {
    model.check_inputs(x_star)?;
    let r_star = model.r_star(x_star)?;
    let prior = kernels::kernel_self_diag(&model.structure.kernels.r, &model.r_params(), x_star)?;
    efficient::predict_variance_diag(model.cache(), &r_star, &prior, batch_size)
}

/// Additional variance of a full prediction (fixed plus random effect) due
/// to estimating the fixed effect by OLS on the training data. Accounts for
/// the correlation between that error and the random-effect prediction,
/// treating the covariance parameters as known.
pub fn fixed_effect_variance(model: &FittedModel, x_star: &Matrix) -> Result<DenseTensor> {
    model.check_inputs(x_star)?;
    let x = &model.train_x;
    let gram = x.transpose() * x;
    let tol = 1e-12 * gram.norm();
    let gram_pinv = gram
        .pseudo_inverse(tol)
        .map_err(|e| Error::NonFinite(e.to_string()))?;
    efficient::fixed_effect_variance(model.cache(), x, &gram_pinv, x_star, &model.r_star(x_star)?)
}

/// Dense oracle for the predictive mean and variance diagonal.
pub fn naive_predict(model: &FittedModel, x_star: &Matrix) -> Result<(DenseTensor, DenseTensor)> {
    model.check_inputs(x_star)?;
    let r_ss = kernels::kernel_self(&model.structure.kernels.r, &model.r_params(), x_star)?;
    naive::dense_predict(
        &model.cache().parts,
        &model.train_residual,
        &model.r_star(x_star)?,
        &r_ss,
    )
}

/// Aleatoric variance tensor `U` (`T_1 x .. x T_D`):
/// `diag(⊗ Xi_i)` scaled by the mean diagonal of the training `Omega`
/// (the diagonal term's variance when `Omega` is isotropic).
pub fn aleatoric_variance(model: &FittedModel) -> Result<DenseTensor> {
    let parts = &model.cache().parts;
    let omega_scale = parts.omega.trace() / parts.omega.nrows() as f64;
    let extents = model.extents();
    DenseTensor::from_fn(&extents, |idx| {
        omega_scale
            * idx
                .iter()
                .zip(&parts.noise)
                .map(|(&k, xi)| xi[(k, k)])
                .product::<f64>()
    })
}

/// Raw parameters drawn uniformly from `[-1, 1]`.
pub fn initial_params(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Full training pipeline: OLS fixed effect, signal bases on the residual,
/// noise bases on what the signal projection leaves, then gradient-based
/// maximization of the log-marginal likelihood.
pub fn fit(d: &Dataset, cfg: &ModelConfig) -> Result<FittedModel> {
    let (structure, fixed_effect, residual) = prepare(d, cfg)?;
    let raw0 = initial_params(structure.layout().total, cfg.seed);
    fit_from(d, cfg, structure, fixed_effect, residual, raw0)
}

/// Steps (1)-(4) of [`fit`]: fixed effect, bases and training residual.
pub fn prepare(d: &Dataset, cfg: &ModelConfig) -> Result<(GpStructure, DenseTensor, DenseTensor)> {
    cfg.validate(Some(d.extents()))?;
    if d.n_subjects() < 2 {
        return Err(Error::InsufficientData(
            "need at least two training subjects".into(),
        ));
    }
    let fixed_effect = fit_fixed_effect_with(&d.x, &d.y, cfg.ridge_fallback)?;
    let residual = d.y.sub(&predict_fixed(&d.x, &fixed_effect)?)?;
    let bases_b = tucker_bases(&residual, &cfg.ranks_p)?;
    let z_hat = project_reconstruct(&residual, &bases_b)?;
    let bases_l = tucker_bases(&residual.sub(&z_hat)?, &cfg.ranks_q)?;
    let structure = GpStructure::new(cfg.kernel_set(), bases_b, bases_l)?;
    Ok((structure, fixed_effect, residual))
}

/// Step (5) of [`fit`] from explicit starting parameters.
pub fn fit_from(
    d: &Dataset,
    cfg: &ModelConfig,
    structure: GpStructure,
    fixed_effect: DenseTensor,
    residual: DenseTensor,
    raw0: Vec<f64>,
) -> Result<FittedModel> {
    let objective = |raw: &[f64]| -> Result<(f64, Vec<f64>)> {
        let ev = efficient::evaluate(&structure, &d.x, &residual, raw)?;
        let g = efficient::gradient(&structure, &d.x, raw, &ev)?;
        Ok((-ev.terms.total(), g.into_iter().map(|v| -v).collect()))
    };
    let result = optim::minimize(objective, &raw0, &cfg.optimizer)?;
    let initial_lml = -result.trace[0].value;
    let grad_norm = result.grad_norm();
    let trace = result
        .trace
        .iter()
        .map(|e| TraceEntry {
            iteration: e.iteration,
            value: -e.value,
            grad_norm: e.grad_norm,
        })
        .collect();
    let mut model = FittedModel::from_parts(
        cfg.clone(),
        fixed_effect,
        structure,
        result.x,
        d.x.clone(),
        residual,
    )?;
    model.report = Some(FitReport {
        trace,
        exit: result.exit,
        iterations: result.iterations,
        initial_lml,
        final_lml: model.train_lml(),
        grad_norm,
    });
    Ok(model)
}
