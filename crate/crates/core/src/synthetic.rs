//! Ground-truth sampler: draws datasets exactly from the mixed-effects model
//! `Y = X x_1 A + Z + E` with tensor-normal `Z` and `E`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::FactorBasis;
use crate::kernels::KernelParams;
use crate::linalg::cholesky_jittered;
use crate::model::{Dataset, GpStructure, KernelSet};
use crate::tensor::DenseTensor;
use crate::Matrix;

const SAMPLER_JITTER: f64 = 1e-10;

/// Generating kernel parameters as positive (constrained) values, in the
/// same per-kernel order as the model's raw parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueParams {
    pub r: Vec<f64>,
    pub omega: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl TrueParams {
    /// Flat raw vector in the model's parameter layout.
    pub fn raw(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for block in [&self.r, &self.omega]
            .into_iter()
            .chain(&self.c)
            .chain(&self.sigma)
        {
            out.extend(KernelParams::from_constrained(block).raw);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSpec {
    /// Fraction of test subjects that receive a deviation.
    pub fraction: f64,
    /// Shift in units of the voxel's total generative standard deviation.
    pub magnitude: f64,
    /// Fraction of voxels in the contiguous (flat-index) block.
    pub region_fraction: f64,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        Self {
            fraction: 0.2,
            magnitude: 3.0,
            region_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_calibrate: usize,
    pub n_test: usize,
    pub shape: Vec<usize>,
    pub n_covariates: usize,
    /// Rank of the true signal bases per mode.
    pub signal_ranks: Vec<usize>,
    /// Rank of the true noise bases per mode.
    pub noise_ranks: Vec<usize>,
    /// Defaults to [`KernelSet::standard`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernels: Option<KernelSet>,
    pub params: TrueParams,
    pub outliers: OutlierSpec,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::standard(vec![6, 6, 6])
    }
}

impl GenConfig {
    /// 40 / 40 / 100 subjects, two covariates, rank-2 signal and noise
    /// bases, standard kernels.
    pub fn standard(shape: Vec<usize>) -> Self {
        let d = shape.len();
        Self {
            n_train: 40,
            n_calibrate: 40,
            n_test: 100,
            signal_ranks: shape.iter().map(|&t| t.min(2)).collect(),
            noise_ranks: shape.iter().map(|&t| t.min(2)).collect(),
            shape,
            n_covariates: 2,
            kernels: None,
            params: TrueParams {
                r: vec![0.5, 1.0, 1.0, 0.05],
                omega: vec![1.0],
                c: vec![vec![0.1, 1.2, 1.0, 0.3]; d],
                sigma: vec![vec![0.05, 0.6, 1.0, 0.6]; d],
            },
            outliers: OutlierSpec::default(),
            seed: 0,
        }
    }

    pub fn n_total(&self) -> usize {
        self.n_train + self.n_calibrate + self.n_test
    }

    pub fn kernel_set(&self) -> KernelSet {
        self.kernels
            .clone()
            .unwrap_or_else(|| KernelSet::standard(self.shape.len()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.shape.len();
        if d == 0 || self.shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid shape {:?}",
                self.shape
            )));
        }
        if self.n_train == 0 || self.n_calibrate == 0 || self.n_test == 0 || self.n_covariates == 0
        {
            return Err(Error::InvalidArgument(
                "all subject and covariate counts must be at least 1".into(),
            ));
        }
        for (name, ranks) in [
            ("signal_ranks", &self.signal_ranks),
            ("noise_ranks", &self.noise_ranks),
        ] {
            if ranks.len() != d {
                return Err(Error::InvalidArgument(format!("{name} needs {d} entries")));
            }
            for (i, (&r, &t)) in ranks.iter().zip(&self.shape).enumerate() {
                if r == 0 || r > t {
                    return Err(Error::InvalidArgument(format!(
                        "{name}[{i}] = {r} outside 1..={t}"
                    )));
                }
            }
        }
        let kernels = self.kernel_set();
        kernels.validate()?;
        if kernels.n_modes() != d {
            return Err(Error::InvalidArgument(format!(
                "{} mode kernels for {d} modes",
                kernels.n_modes()
            )));
        }
        let p = &self.params;
        if p.c.len() != d || p.sigma.len() != d {
            return Err(Error::InvalidArgument(format!(
                "params.c and params.sigma need {d} entries"
            )));
        }
        let layout = kernels.layout();
        if p.raw().len() != layout.total
            || p.r.len() != layout.r.len()
            || p.omega.len() != layout.omega.len()
            || p.c.iter().zip(&layout.c).any(|(v, r)| v.len() != r.len())
            || p.sigma
                .iter()
                .zip(&layout.sigma)
                .any(|(v, r)| v.len() != r.len())
        {
            return Err(Error::InvalidArgument(
                "params do not match the kernel layout".into(),
            ));
        }
        let all = [&p.r, &p.omega].into_iter().chain(&p.c).chain(&p.sigma);
        if all.flatten().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(
                "true kernel parameters must be positive".into(),
            ));
        }
        let o = &self.outliers;
        if !(0.0..1.0).contains(&o.fraction) {
            return Err(Error::InvalidArgument(format!(
                "outliers.fraction {} outside [0, 1)",
                o.fraction
            )));
        }
        if !(o.region_fraction > 0.0 && o.region_fraction <= 1.0) || !o.magnitude.is_finite() {
            return Err(Error::InvalidArgument(
                "invalid outlier region or magnitude".into(),
            ));
        }
        Ok(())
    }
}

/// Every generating quantity of a synthetic dataset.
#[derive(Clone, Debug)]
pub struct Truth {
    pub kernels: KernelSet,
    /// Raw parameters in the model layout.
    pub params: Vec<f64>,
    pub fixed_effect: DenseTensor,
    pub bases_b: FactorBasis,
    pub bases_l: FactorBasis,
    /// Per test subject: whether a deviation was injected.
    pub labels: Vec<bool>,
    /// Flat voxel indices of the injected block.
    pub outlier_voxels: std::ops::Range<usize>,
    /// Total generative standard deviation per voxel and test subject.
    pub test_total_sd: DenseTensor,
}

impl Truth {
    /// Plain-text manifest of the generating quantities.
    pub fn manifest(&self, cfg: &GenConfig) -> String {
        let mut s = String::new();
        s.push_str(&format!("shape {:?}\n", cfg.shape));
        s.push_str(&format!(
            "subjects train {} calibrate {} test {}\n",
            cfg.n_train, cfg.n_calibrate, cfg.n_test
        ));
        s.push_str(&format!("covariates {}\n", cfg.n_covariates));
        s.push_str(&format!(
            "signal_ranks {:?}\nnoise_ranks {:?}\n",
            cfg.signal_ranks, cfg.noise_ranks
        ));
        s.push_str(&format!("raw_params {:?}\n", self.params));
        s.push_str(&format!("seed {}\n", cfg.seed));
        s.push_str(&format!(
            "outlier_voxels {}..{}\n",
            self.outlier_voxels.start, self.outlier_voxels.end
        ));
        let idx: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i]).collect();
        s.push_str(&format!("outlier_test_subjects {idx:?}\n"));
        s
    }
}

fn standard_normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<DenseTensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    DenseTensor::new(shape.to_vec(), data)
}

/// Draw from the zero-mean tensor normal with `cov(vec Z) = row_cov ⊗ (⊗ mode_covs)`.
pub fn sample_tensor_normal(
    row_cov: &Matrix,
    mode_covs: &[Matrix],
    seed: u64,
) -> Result<DenseTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(row_cov, mode_covs, &mut rng)
}

fn sample_with(
    row_cov: &Matrix,
    mode_covs: &[Matrix],
    rng: &mut ChaCha8Rng,
) -> Result<DenseTensor> {
    let mut shape = vec![row_cov.nrows()];
    for (i, m) in std::iter::once(row_cov).chain(mode_covs).enumerate() {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::InvalidShape(format!(
                "covariance {i} is {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if i > 0 {
            shape.push(m.nrows());
        }
    }
    let mut z = standard_normal_tensor(&shape, rng)?;
    for (mode, m) in std::iter::once(row_cov).chain(mode_covs).enumerate() {
        let chol = cholesky_jittered(m, SAMPLER_JITTER, &format!("sampler covariance {mode}"))?;
        z = z.mode_product(&chol.l(), mode)?;
    }
    Ok(z)
}

fn random_orthonormal(t: usize, r: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = Matrix::from_fn(t, r, |_, _| StandardNormal.sample(rng));
    g.qr().q().columns(0, r).into_owned()
}

/// Train / calibrate / test splits plus the generating truth. Deviations are
/// injected into the test split only.
pub fn make_dataset(cfg: &GenConfig) -> Result<(Dataset, Dataset, Dataset, Truth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_total();
    let f = cfg.n_covariates;
    let x = Matrix::from_fn(n, f, |_, _| StandardNormal.sample(&mut rng));
    let mut a_shape = vec![f];
    a_shape.extend(&cfg.shape);
    let fixed_effect = standard_normal_tensor(&a_shape, &mut rng)?;
    let bases_b = FactorBasis::new(
        cfg.shape
            .iter()
            .zip(&cfg.signal_ranks)
            .map(|(&t, &r)| random_orthonormal(t, r, &mut rng))
            .collect(),
    )?;
    let bases_l = FactorBasis::new(
        cfg.shape
            .iter()
            .zip(&cfg.noise_ranks)
            .map(|(&t, &r)| random_orthonormal(t, r, &mut rng))
            .collect(),
    )?;
    let kernels = cfg.kernel_set();
    let structure = GpStructure::new(kernels.clone(), bases_b.clone(), bases_l.clone())?;
    let raw = cfg.params.raw();
    let parts = structure.parts(&x, &raw)?;
    let z = sample_with(&parts.r, &parts.signal, &mut rng)?;
    let e = sample_with(&parts.omega, &parts.noise, &mut rng)?;
    let mut y = fixed_effect.mode_product(&x, 0)?.add(&z)?.add(&e)?;

    let t: usize = cfg.shape.iter().product();
    let test_start = cfg.n_train + cfg.n_calibrate;
    let signal_diag: Vec<f64> = total_mode_diag(&parts.signal, &cfg.shape)?;
    let noise_diag: Vec<f64> = total_mode_diag(&parts.noise, &cfg.shape)?;
    let mut sd = Vec::with_capacity(cfg.n_test * t);
    for i in test_start..n {
        for k in 0..t {
            sd.push(
                (parts.r[(i, i)] * signal_diag[k] + parts.omega[(i, i)] * noise_diag[k]).sqrt(),
            );
        }
    }
    let mut sd_shape = vec![cfg.n_test];
    sd_shape.extend(&cfg.shape);
    let test_total_sd = DenseTensor::new(sd_shape, sd)?;

    let n_out = (cfg.outliers.fraction * cfg.n_test as f64).round() as usize;
    let block = ((cfg.outliers.region_fraction * t as f64).round() as usize).clamp(1, t);
    let mut order: Vec<usize> = (0..cfg.n_test).collect();
    order.shuffle(&mut rng);
    let start = if block < t {
        rand::Rng::random_range(&mut rng, 0..=(t - block))
    } else {
        0
    };
    let mut labels = vec![false; cfg.n_test];
    for &s in &order[..n_out] {
        labels[s] = true;
        let base = (test_start + s) * t;
        for k in start..start + block {
            y.data_mut()[base + k] += cfg.outliers.magnitude * test_total_sd.data()[s * t + k];
        }
    }

    let full = Dataset::new(x, y)?;
    let train = full.select(&(0..cfg.n_train).collect::<Vec<_>>())?;
    let calibrate = full.select(&(cfg.n_train..test_start).collect::<Vec<_>>())?;
    let test = full.select(&(test_start..n).collect::<Vec<_>>())?;
    Ok((
        train,
        calibrate,
        test,
        Truth {
            kernels,
            params: raw,
            fixed_effect,
            bases_b,
            bases_l,
            labels,
            outlier_voxels: start..start + block,
            test_total_sd,
        },
    ))
}

/// `diag(⊗ M_i)` in row-major order.
fn total_mode_diag(mats: &[Matrix], shape: &[usize]) -> Result<Vec<f64>> {
    let t = DenseTensor::from_fn(shape, |idx| {
        idx.iter().zip(mats).map(|(&k, m)| m[(k, k)]).product()
    })?;
    Ok(t.into_data())
}
