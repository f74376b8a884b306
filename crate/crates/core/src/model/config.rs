use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{InputKind, KernelSpec};
use crate::optim::OptimizerSettings;

/// Covariance functions for the subject covariances (`R`, `Omega`) and the
/// latent mode covariances (`C_i`, `Sigma_i`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSet {
    pub r: KernelSpec,
    pub omega: KernelSpec,
    pub c: Vec<KernelSpec>,
    pub sigma: Vec<KernelSpec>,
}

impl KernelSet {
    /// Composite kernels for `R`, `C_i`, `Sigma_i` and a diagonal `Omega`.
    pub fn standard(n_modes: usize) -> Self {
        Self {
            r: KernelSpec::composite(InputKind::FeatureRows),
            omega: KernelSpec::diagonal(InputKind::FeatureRows),
            c: vec![KernelSpec::composite(InputKind::IntegerIndex); n_modes],
            sigma: vec![KernelSpec::composite(InputKind::IntegerIndex); n_modes],
        }
    }

    pub fn n_modes(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.c.len() != self.sigma.len() {
            return Err(Error::InvalidArgument(format!(
                "{} signal mode kernels but {} noise mode kernels",
                self.c.len(),
                self.sigma.len()
            )));
        }
        for k in [&self.r, &self.omega] {
            k.validate()?;
            if k.input_kind != InputKind::FeatureRows {
                return Err(Error::InvalidArgument(
                    "subject kernels take covariate rows as inputs".into(),
                ));
            }
        }
        if !self.omega.has_diagonal() {
            return Err(Error::InvalidArgument(
                "the subject noise kernel needs a diagonal term to stay positive definite".into(),
            ));
        }
        for k in self.c.iter().chain(&self.sigma) {
            k.validate()?;
            if k.input_kind != InputKind::IntegerIndex {
                return Err(Error::InvalidArgument(
                    "mode kernels take latent component indices as inputs".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let r = take(self.r.n_params());
        let omega = take(self.omega.n_params());
        let c = self.c.iter().map(|k| take(k.n_params())).collect();
        let sigma = self.sigma.iter().map(|k| take(k.n_params())).collect();
        ParamLayout {
            r,
            omega,
            c,
            sigma,
            total: off,
        }
    }
}

/// Where each kernel's raw parameters live in the flat vector, ordered
/// `(R, Omega, C_1..C_D, Sigma_1..Sigma_D)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub r: Range<usize>,
    pub omega: Range<usize>,
    pub c: Vec<Range<usize>>,
    pub sigma: Vec<Range<usize>>,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamBlock {
    R,
    Omega,
    C(usize),
    Sigma(usize),
}

impl ParamLayout {
    pub fn block_of(&self, index: usize) -> Option<(ParamBlock, usize)> {
        if self.r.contains(&index) {
            return Some((ParamBlock::R, index - self.r.start));
        }
        if self.omega.contains(&index) {
            return Some((ParamBlock::Omega, index - self.omega.start));
        }
        for (i, r) in self.c.iter().enumerate() {
            if r.contains(&index) {
                return Some((ParamBlock::C(i), index - r.start));
            }
        }
        for (i, r) in self.sigma.iter().enumerate() {
            if r.contains(&index) {
                return Some((ParamBlock::Sigma(i), index - r.start));
            }
        }
        None
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Signal basis ranks `P_i`.
    pub ranks_p: Vec<usize>,
    /// Noise basis ranks `Q_i`.
    pub ranks_q: Vec<usize>,
    /// Defaults to [`KernelSet::standard`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<KernelSet>,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub seed: u64,
    /// Fall back to a small ridge when the design is rank deficient.
    #[serde(default = "default_true")]
    pub ridge_fallback: bool,
}

impl ModelConfig {
    pub fn new(ranks_p: Vec<usize>, ranks_q: Vec<usize>) -> Self {
        Self {
            ranks_p,
            ranks_q,
            kernels: None,
            optimizer: OptimizerSettings::default(),
            seed: 0,
            ridge_fallback: true,
        }
    }

    pub fn n_modes(&self) -> usize {
        self.ranks_p.len()
    }

    pub fn kernel_set(&self) -> KernelSet {
        self.kernels
            .clone()
            .unwrap_or_else(|| KernelSet::standard(self.n_modes()))
    }

    /// Number of kernel parameters optimized.
    pub fn parameter_count(&self) -> usize {
        self.kernel_set().layout().total
    }

    /// `P_1..P_D, Q_1..Q_D`.
    pub fn hyperparameter_count(&self) -> usize {
        self.ranks_p.len() + self.ranks_q.len()
    }

    /// Checks everything that does not depend on data; `extents` adds the
    /// rank-vs-extent checks when known.
    pub fn validate(&self, extents: Option<&[usize]>) -> Result<()> {
        let d = self.ranks_p.len();
        if d == 0 {
            return Err(Error::InvalidArgument(
                "ranks_p must name at least one mode".into(),
            ));
        }
        if self.ranks_q.len() != d {
            return Err(Error::InvalidArgument(format!(
                "ranks_q has {} entries, ranks_p has {d}",
                self.ranks_q.len()
            )));
        }
        for (name, ranks) in [("P", &self.ranks_p), ("Q", &self.ranks_q)] {
            if let Some(i) = ranks.iter().position(|&r| r == 0) {
                return Err(Error::InvalidArgument(format!(
                    "{name}_{} must be at least 1",
                    i + 1
                )));
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
        if let Some(ext) = extents {
            if ext.len() != d {
                return Err(Error::InvalidArgument(format!(
                    "config has {d} modes, data has {}",
                    ext.len()
                )));
            }
            for i in 0..d {
                if self.ranks_p[i] > ext[i] {
                    return Err(Error::InvalidArgument(format!(
                        "P_{} = {} exceeds extent T_{} = {}",
                        i + 1,
                        self.ranks_p[i],
                        i + 1,
                        ext[i]
                    )));
                }
                if self.ranks_q[i] > ext[i] {
                    return Err(Error::InvalidArgument(format!(
                        "Q_{} = {} exceeds extent T_{} = {}",
                        i + 1,
                        self.ranks_q[i],
                        i + 1,
                        ext[i]
                    )));
                }
                if self.ranks_q[i] < ext[i] && !kernels.sigma[i].has_diagonal() {
                    return Err(Error::InvalidArgument(format!(
                        "noise kernel {} needs a diagonal term when Q_{} < T_{}",
                        i + 1,
                        i + 1,
                        i + 1
                    )));
                }
            }
        }
        if !(self.optimizer.grad_tol >= 0.0) {
            return Err(Error::InvalidArgument(
                "optimizer.grad_tol must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_counts_for_three_modes() {
        let cfg = ModelConfig::new(vec![3, 3, 3], vec![1, 1, 1]);
        assert_eq!(cfg.parameter_count(), 29);
        assert_eq!(cfg.hyperparameter_count(), 6);
        let l = cfg.kernel_set().layout();
        assert_eq!(l.r, 0..4);
        assert_eq!(l.omega, 4..5);
        assert_eq!(l.c[2], 13..17);
        assert_eq!(l.sigma[0], 17..21);
        assert_eq!(l.block_of(5), Some((ParamBlock::C(0), 0)));
        assert_eq!(l.block_of(28), Some((ParamBlock::Sigma(2), 3)));
        assert_eq!(l.block_of(29), None);
    }

    #[test]
    fn validation_names_the_rank() {
        let cfg = ModelConfig::new(vec![2, 5], vec![1, 1]);
        let err = cfg.validate(Some(&[3, 4])).unwrap_err().to_string();
        assert!(err.contains("P_2"), "{err}");
        assert!(ModelConfig::new(vec![2], vec![1, 1])
            .validate(None)
            .is_err());
        assert!(ModelConfig::new(vec![0], vec![1]).validate(None).is_err());
    }
}
