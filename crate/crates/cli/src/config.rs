//! Run configuration: one JSON file whose sections each command reads.
//! Relative paths resolve against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tgpp::model::ModelConfig;
use tgpp::synthetic::GenConfig;

use crate::error::CliError;
use crate::pipeline::ScoringOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Covariates, an `N x F` .dtf tensor.
    pub x: PathBuf,
    /// Responses, an `N x T_1 x .. x T_D` .dtf tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Subjects per benchmark problem.
    pub n_subjects: usize,
    /// Mode extents timed on the efficient path.
    pub efficient_shapes: Vec<Vec<usize>>,
    /// Mode extents also timed on the dense path.
    pub naive_shapes: Vec<Vec<usize>>,
    pub ranks: Vec<usize>,
    /// Timed evaluations per size; the minimum is reported.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let cube = |a, b, c| vec![a, b, c];
        Self {
            n_subjects: 32,
            efficient_shapes: vec![
                cube(4, 4, 4),
                cube(8, 4, 4),
                cube(8, 8, 4),
                cube(8, 8, 8),
                cube(16, 8, 8),
                cube(16, 16, 8),
                cube(16, 16, 16),
                cube(32, 16, 16),
                cube(32, 32, 16),
            ],
            naive_shapes: vec![cube(4, 2, 2), cube(4, 4, 2), cube(4, 4, 4), cube(8, 4, 4)],
            ranks: vec![2, 2, 2],
            repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproConfig {
    pub repeats: usize,
    /// Also score the single-output baseline.
    pub baseline: bool,
}

impl Default for ReproConfig {
    fn default() -> Self {
        Self {
            repeats: 10,
            baseline: true,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_model() -> ModelConfig {
    ModelConfig::new(vec![3, 3, 3], vec![2, 2, 2])
}

fn default_model_file() -> PathBuf {
    PathBuf::from("model.tgpm")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads; all cores when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Training data for `fit`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataPaths>,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub generator: GenConfig,
    /// Fitted model read by `predict` and `score`.
    #[serde(default = "default_model_file")]
    pub model_file: PathBuf,
    /// Subjects to predict; `y` enables the S-NPM output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict: Option<DataPaths>,
    /// Healthy subjects the extreme-value calibration is fitted on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrate: Option<DataPaths>,
    /// Subjects scored by `score`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<DataPaths>,
    /// Optional 0/1 vector of test labels (1 = abnormal).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub scoring: ScoringOptions,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub repro: ReproConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config parses")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |field: &str, e: tgpp::Error| CliError::Config(format!("{field}: {e}"));
        self.model.validate(None).map_err(|e| invalid("model", e))?;
        self.generator
            .validate()
            .map_err(|e| invalid("generator", e))?;
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        let s = &self.scoring;
        if !(s.top_fraction > 0.0 && s.top_fraction <= 1.0) {
            return Err(CliError::Config(format!(
                "scoring.top_fraction = {} outside (0, 1]",
                s.top_fraction
            )));
        }
        if s.batch_size == 0 {
            return Err(CliError::Config(
                "scoring.batch_size must be at least 1".into(),
            ));
        }
        if self.repro.repeats == 0 {
            return Err(CliError::Config("repro.repeats must be at least 1".into()));
        }
        let b = &self.bench;
        if b.n_subjects < 2 || b.repeats == 0 {
            return Err(CliError::Config(
                "bench needs n_subjects >= 2 and repeats >= 1".into(),
            ));
        }
        for shape in b.efficient_shapes.iter().chain(&b.naive_shapes) {
            if shape.len() != b.ranks.len() {
                return Err(CliError::Config(format!(
                    "bench shape {shape:?} does not match {} ranks",
                    b.ranks.len()
                )));
            }
            if let Some(i) = shape
                .iter()
                .zip(&b.ranks)
                .position(|(t, r)| r > t || *r == 0)
            {
                return Err(CliError::Config(format!(
                    "bench rank {} invalid for extent {} (mode {})",
                    b.ranks[i],
                    shape[i],
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Rewrite every relative path against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        fix(&mut self.model_file);
        for d in [
            &mut self.data,
            &mut self.predict,
            &mut self.calibrate,
            &mut self.test,
        ]
        .into_iter()
        .flatten()
        {
            fix(&mut d.x);
            if let Some(y) = d.y.as_mut() {
                fix(y);
            }
        }
        if let Some(l) = self.labels.as_mut() {
            fix(l);
        }
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parse and validate a config file. Paths stay as written; see
/// [`RunConfig::resolve_paths`].
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Stage seed from the master seed (SplitMix64 finalizer over both).
pub fn derive_seed(master: u64, stage: u64) -> u64 {
    let mut z = master ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const STAGE_GENERATOR: u64 = 1;
pub const STAGE_MODEL: u64 = 2;
pub const STAGE_REPEAT: u64 = 1000;
