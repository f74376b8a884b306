//! End-to-end synthetic protocol: generate, fit, calibrate on healthy
//! subjects, score the test split, and compare against the single-output
//! baseline.

use serde::{Deserialize, Serialize};

use tgpp::kernels::{InputKind, KernelSpec};
use tgpp::model::{fit, st_gpr_fit_predict, FittedModel, ModelConfig, StGprSettings};
use tgpp::normative::{
    abnormality_prob, auc, compute_snpm, gevd_fit, ks_test_standard_normal, model_snpm_with,
    subject_statistics, GevdCalibration, KsResult, Snpm, DEFAULT_TOP_FRACTION,
};
use tgpp::synthetic::{make_dataset, GenConfig};
use tgpp::{DenseTensor, Result};

use crate::config::{derive_seed, RunConfig, STAGE_MODEL, STAGE_REPEAT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringOptions {
    pub top_fraction: f64,
    /// Rank absolute rather than signed deviations.
    pub absolute: bool,
    pub batch_size: usize,
    /// Add the fixed-effect estimation variance to the epistemic variance.
    pub fixed_effect_uncertainty: bool,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            top_fraction: DEFAULT_TOP_FRACTION,
            absolute: false,
            batch_size: 4096,
            fixed_effect_uncertainty: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectScore {
    pub subject: usize,
    pub statistic: f64,
    pub probability: f64,
    pub label: Option<bool>,
}

/// Fit the GEV on calibration maps and score the test maps. The AUC ranks
/// subjects by statistic, which orders them like the abnormality
/// probability but without the ties of a saturated CDF.
pub fn score_maps(
    calibration: &Snpm,
    test: &Snpm,
    labels: Option<&[bool]>,
    opts: &ScoringOptions,
) -> Result<(GevdCalibration, Vec<SubjectScore>, Option<f64>)> {
    let cal_stats = subject_statistics(calibration, opts.top_fraction, opts.absolute)?;
    let mut gev = gevd_fit(&cal_stats)?;
    gev.top_fraction = opts.top_fraction;
    let stats = subject_statistics(test, opts.top_fraction, opts.absolute)?;
    let scores: Vec<SubjectScore> = stats
        .iter()
        .enumerate()
        .map(|(i, &s)| SubjectScore {
            subject: i,
            statistic: s,
            probability: abnormality_prob(&gev, s),
            label: labels.map(|l| l[i]),
        })
        .collect();
    let area = match labels {
        Some(l) if l.iter().any(|&v| v) && l.iter().any(|&v| !v) => {
            let stats: Vec<f64> = scores.iter().map(|s| s.statistic).collect();
            Some(auc(l, &stats)?)
        }
        _ => None,
    };
    Ok((gev, scores, area))
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub model: FittedModel,
    /// KS test of the pooled test-split maps of healthy subjects.
    pub ks: KsResult,
    pub auc: Option<f64>,
    pub baseline_auc: Option<f64>,
    pub scores: Vec<SubjectScore>,
    pub test_snpm: Snpm,
}

/// Single-output GP maps: `(Y - mean) / sqrt(var)`.
fn baseline_snpm(y: &DenseTensor, mean: &DenseTensor, var: &DenseTensor) -> Result<Snpm> {
    let zeros = DenseTensor::zeros(&y.shape()[1..])?;
    compute_snpm(y, mean, var, &zeros)
}

pub fn run_pipeline(
    gen: &GenConfig,
    model_cfg: &ModelConfig,
    opts: &ScoringOptions,
    baseline: bool,
) -> Result<PipelineOutcome> {
    let (train, calibrate, test, truth) = make_dataset(gen)?;
    let model = fit(&train, model_cfg)?;
    let cal_snpm = model_snpm_with(
        &model,
        &calibrate,
        opts.batch_size,
        opts.fixed_effect_uncertainty,
    )?;
    let test_snpm = model_snpm_with(
        &model,
        &test,
        opts.batch_size,
        opts.fixed_effect_uncertainty,
    )?;
    let (_, scores, area) = score_maps(&cal_snpm, &test_snpm, Some(&truth.labels), opts)?;

    let t = test_snpm.values.len() / test_snpm.n_subjects();
    let healthy: Vec<f64> = (0..test_snpm.n_subjects())
        .filter(|&i| !truth.labels[i])
        .flat_map(|i| test_snpm.values.data()[i * t..(i + 1) * t].iter().copied())
        .collect();
    let ks = ks_test_standard_normal(&healthy)?;

    let baseline_auc = if baseline && area.is_some() {
        let kernel = model.structure.kernels.r.clone();
        let settings = StGprSettings::default();
        let both_x = {
            let n_c = calibrate.x.nrows();
            tgpp::Matrix::from_fn(n_c + test.x.nrows(), test.x.ncols(), |i, j| {
                if i < n_c {
                    calibrate.x[(i, j)]
                } else {
                    test.x[(i - n_c, j)]
                }
            })
        };
        let res = st_gpr_fit_predict(&train, &both_x, &kernel_or_default(kernel), &settings)?;
        let n_c = calibrate.x.nrows();
        let cal_rows: Vec<usize> = (0..n_c).collect();
        let test_rows: Vec<usize> = (n_c..n_c + test.x.nrows()).collect();
        let cal = baseline_snpm(
            &calibrate.y,
            &res.mean.select_leading(&cal_rows)?,
            &res.var.select_leading(&cal_rows)?,
        )?;
        let tst = baseline_snpm(
            &test.y,
            &res.mean.select_leading(&test_rows)?,
            &res.var.select_leading(&test_rows)?,
        )?;
        score_maps(&cal, &tst, Some(&truth.labels), opts)?.2
    } else {
        None
    };
    Ok(PipelineOutcome {
        model,
        ks,
        auc: area,
        baseline_auc,
        scores,
        test_snpm,
    })
}

fn kernel_or_default(k: KernelSpec) -> KernelSpec {
    if k.input_kind == InputKind::FeatureRows {
        k
    } else {
        KernelSpec::composite(InputKind::FeatureRows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepeatOutcome {
    pub repeat: usize,
    pub seed: u64,
    pub ks: KsResult,
    pub auc: Option<f64>,
    pub baseline_auc: Option<f64>,
    pub final_lml: f64,
}

/// The synthetic protocol repeated `repro.repeats` times. Repeat `r` uses
/// generator seed `derive_seed(seed, STAGE_REPEAT + r)` and a model seed
/// derived from that.
pub fn run_repeats(cfg: &RunConfig) -> Result<Vec<RepeatOutcome>> {
    (0..cfg.repro.repeats)
        .map(|r| {
            let seed = derive_seed(cfg.seed, STAGE_REPEAT + r as u64);
            let mut gen = cfg.generator.clone();
            gen.seed = seed;
            let mut model = cfg.model.clone();
            model.seed = derive_seed(seed, STAGE_MODEL);
            let baseline = cfg.repro.baseline && gen.outliers.fraction > 0.0;
            let o = run_pipeline(&gen, &model, &cfg.scoring, baseline)?;
            log::info!("repeat {r}: KS p {:.4}, AUC {:?}", o.ks.p_value, o.auc);
            Ok(RepeatOutcome {
                repeat: r,
                seed,
                ks: o.ks,
                auc: o.auc,
                baseline_auc: o.baseline_auc,
                final_lml: o.model.train_lml(),
            })
        })
        .collect()
}

/// Mean and sample standard deviation; `None` for an empty slice.
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}
