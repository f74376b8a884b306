//! Normative modeling on top of a fitted model: standardized deviation maps,
//! extreme-value calibration of per-subject tail statistics, and ROC
//! evaluation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{
    aleatoric_variance, fixed_effect_variance, predict_mean, predict_variance_diag, Dataset,
    FittedModel,
};
use crate::optim::{self, OptimizerSettings};
use crate::tensor::DenseTensor;

pub const DEFAULT_TOP_FRACTION: f64 = 0.01;

/// Standardized deviations `(Y - Y*) / sqrt(V* + U)`, `N* x T_1 x .. x T_D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Snpm {
    pub values: DenseTensor,
}

impl Snpm {
    pub fn n_subjects(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn subject(&self, i: usize) -> DenseTensor {
        self.values.leading_slice(i)
    }
}

/// `U` (`T_1 x .. x T_D`) is broadcast over subjects.
pub fn compute_snpm(
    y: &DenseTensor,
    y_star: &DenseTensor,
    v_star: &DenseTensor,
    u: &DenseTensor,
) -> Result<Snpm> {
    if y.shape() != y_star.shape() || y.shape() != v_star.shape() {
        return Err(Error::DimensionMismatch(format!(
            "data {:?}, prediction {:?}, variance {:?}",
            y.shape(),
            y_star.shape(),
            v_star.shape()
        )));
    }
    if y.order() < 2 || u.shape() != &y.shape()[1..] {
        return Err(Error::DimensionMismatch(format!(
            "aleatoric variance {:?} for data {:?}",
            u.shape(),
            y.shape()
        )));
    }
    let t = u.len();
    let mut out = Vec::with_capacity(y.len());
    for (k, ((&yv, &ys), &vs)) in y
        .data()
        .iter()
        .zip(y_star.data())
        .zip(v_star.data())
        .enumerate()
    {
        let s = vs + u.data()[k % t];
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "total variance {s} at subject {}, voxel {}",
                k / t,
                k % t
            )));
        }
        out.push((yv - ys) / s.sqrt());
    }
    Ok(Snpm {
        values: DenseTensor::new(y.shape().to_vec(), out)?,
    })
}

/// S-NPM of `d` under a fitted model: full prediction (fixed plus random
/// effect), epistemic variance (fixed-effect estimation variance included)
/// and aleatoric variance.
pub fn model_snpm(model: &FittedModel, d: &Dataset, batch_size: usize) -> Result<Snpm> {
    model_snpm_with(model, d, batch_size, true)
}

/// As [`model_snpm`]; `fixed_effect_uncertainty` adds
/// [`fixed_effect_variance`] to the epistemic variance.
pub fn model_snpm_with(
    model: &FittedModel,
    d: &Dataset,
    batch_size: usize,
    fixed_effect_uncertainty: bool,
) -> Result<Snpm> {
    let y_star = model
        .predict_fixed(&d.x)?
        .add(&predict_mean(model, &d.x)?)?;
    let mut v_star = predict_variance_diag(model, &d.x, batch_size)?;
    if fixed_effect_uncertainty {
        v_star = v_star.add(&fixed_effect_variance(model, &d.x)?)?;
    }
    compute_snpm(&d.y, &y_star, &v_star, &aleatoric_variance(model)?)
}

/// Mean of the largest `ceil(top_fraction * T)` signed values of one map.
pub fn subject_statistic(map: &DenseTensor, top_fraction: f64) -> Result<f64> {
    subject_statistic_with(map, top_fraction, false)
}

/// As [`subject_statistic`], optionally ranking absolute values.
pub fn subject_statistic_with(map: &DenseTensor, top_fraction: f64, absolute: bool) -> Result<f64> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "top fraction {top_fraction} outside (0, 1]"
        )));
    }
    if map.is_empty() {
        return Err(Error::InvalidArgument("empty deviation map".into()));
    }
    let mut v: Vec<f64> = if absolute {
        map.data().iter().map(|x| x.abs()).collect()
    } else {
        map.data().to_vec()
    };
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("deviation map".into()));
    }
    let k = ((top_fraction * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

/// One statistic per subject of `snpm`.
pub fn subject_statistics(snpm: &Snpm, top_fraction: f64, absolute: bool) -> Result<Vec<f64>> {
    (0..snpm.n_subjects())
        .map(|i| subject_statistic_with(&snpm.subject(i), top_fraction, absolute))
        .collect()
}

/// Generalized extreme value distribution fitted to block statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GevdCalibration {
    pub location: f64,
    pub scale: f64,
    pub shape: f64,
    pub top_fraction: f64,
}

/// `y = ln(1 + xi z) / xi` and `dy/dxi`, accurate through `xi = 0`.
fn gev_y(z: f64, xi: f64) -> (f64, f64) {
    let u = xi * z;
    if u.abs() < 0.1 {
        // power series of ln(1+u)/u and of (u/(1+u) - ln(1+u))/u^2
        let mut y = 0.0;
        let mut dy = 0.0;
        let mut pow = 1.0;
        for k in 1..=30 {
            let kf = k as f64;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            y += sign * pow / kf;
            dy -= sign * pow * kf / (kf + 1.0);
            pow *= u;
        }
        (z * y, z * z * dy)
    } else {
        let t = 1.0 + u;
        (u.ln_1p() / xi, (u / t - u.ln_1p()) / (xi * xi))
    }
}

/// Log-density of one point and its gradient over `(mu, ln sigma, xi)`;
/// `None` outside the support.
fn gev_logpdf_grad(x: f64, mu: f64, ln_sigma: f64, xi: f64) -> Option<(f64, [f64; 3])> {
    let sigma = ln_sigma.exp();
    let z = (x - mu) / sigma;
    let t = 1.0 + xi * z;
    if !(t > 0.0) {
        return None;
    }
    let (y, y_xi) = gev_y(z, xi);
    let e = (-y).exp();
    let l = -ln_sigma - (xi * z).ln_1p() - y - e;
    if !l.is_finite() {
        return None;
    }
    let dz = -xi / t - (1.0 - e) / t;
    let dxi = -z / t - y_xi * (1.0 - e);
    Some((l, [-dz / sigma, -1.0 - dz * z, dxi]))
}

/// Total GEV log-likelihood and gradient over `(mu, ln sigma, xi)`.
pub fn gev_loglik(data: &[f64], mu: f64, ln_sigma: f64, xi: f64) -> Option<(f64, [f64; 3])> {
    let mut total = 0.0;
    let mut g = [0.0; 3];
    for &x in data {
        let (l, gi) = gev_logpdf_grad(x, mu, ln_sigma, xi)?;
        total += l;
        for k in 0..3 {
            g[k] += gi[k];
        }
    }
    Some((total, g))
}

/// Maximum-likelihood GEV fit. The data are standardized first, which makes
/// the estimate exactly location- and scale-equivariant.
pub fn gevd_fit(stats: &[f64]) -> Result<GevdCalibration> {
    if stats.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "{} calibration statistics, need at least 10",
            stats.len()
        )));
    }
    if stats.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("calibration statistics".into()));
    }
    let n = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / n;
    let sd = (stats.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::InvalidArgument(
            "degenerate calibration statistics".into(),
        ));
    }
    let u: Vec<f64> = stats.iter().map(|v| (v - mean) / sd).collect();
    let settings = OptimizerSettings {
        max_iters: 1000,
        grad_tol: 1e-9,
        memory: 10,
    };
    let objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (l, g) = gev_loglik(&u, p[0], p[1], p[2])
            .ok_or_else(|| Error::NonFinite("GEV support".into()))?;
        Ok((-l, g.iter().map(|v| -v).collect()))
    };
    let mut start = vec![0.0, 0.0, 0.1];
    if gev_loglik(&u, start[0], start[1], start[2]).is_none() {
        start[2] = 0.0;
    }
    let res = optim::minimize(objective, &start, &settings)?;
    Ok(GevdCalibration {
        location: mean + sd * res.x[0],
        scale: sd * res.x[1].exp(),
        shape: res.x[2],
        top_fraction: DEFAULT_TOP_FRACTION,
    })
}

impl GevdCalibration {
    pub fn cdf(&self, x: f64) -> f64 {
        if x.is_infinite() {
            return if x > 0.0 { 1.0 } else { 0.0 };
        }
        let z = (x - self.location) / self.scale;
        if 1.0 + self.shape * z <= 0.0 {
            return if self.shape > 0.0 { 0.0 } else { 1.0 };
        }
        (-(-gev_y(z, self.shape).0).exp()).exp()
    }

    /// Inverse CDF for `p` in `(0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        let y = -p.ln();
        if self.shape.abs() < 1e-12 {
            self.location - self.scale * y.ln()
        } else {
            self.location + self.scale * (y.powf(-self.shape) - 1.0) / self.shape
        }
    }
}

/// GEV CDF of a subject statistic, read as the probability of abnormality.
pub fn abnormality_prob(cal: &GevdCalibration, stat: f64) -> f64 {
    if stat.is_nan() {
        return f64::NAN;
    }
    cal.cdf(stat).clamp(0.0, 1.0)
}

/// Area under the ROC curve via the Mann-Whitney statistic (ties count 1/2).
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels, {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let r1: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n0 as f64 * n1 as f64))
}

/// One-sample Kolmogorov-Smirnov test against the standard normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_test_standard_normal(values: &[f64]) -> Result<KsResult> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("KS sample".into()));
    }
    let normal = Normal::standard();
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = normal.cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let sq = n.sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q((sq + 0.12 + 0.11 / sq) * d),
    })
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_at_location() {
        let cal = GevdCalibration {
            location: 1.0,
            scale: 2.0,
            shape: 0.0,
            top_fraction: 0.01,
        };
        assert!((abnormality_prob(&cal, 1.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(abnormality_prob(&cal, f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for shape in [-0.3, 0.0, 0.2] {
            let cal = GevdCalibration {
                location: 0.5,
                scale: 1.5,
                shape,
                top_fraction: 0.01,
            };
            for p in [0.05, 0.5, 0.95] {
                assert!((cal.cdf(cal.quantile(p)) - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gev_gradient_matches_differences() {
        let data = [0.3, -0.5, 1.2, 2.5, 0.0, -1.1];
        for p in [[0.1, 0.2, 0.15], [0.0, -0.1, -0.2], [0.2, 0.1, 0.0]] {
            let (_, g) = gev_loglik(&data, p[0], p[1], p[2]).unwrap();
            for k in 0..3 {
                let h = 1e-6;
                let mut a = p;
                let mut b = p;
                a[k] += h;
                b[k] -= h;
                let fd = (gev_loglik(&data, a[0], a[1], a[2]).unwrap().0
                    - gev_loglik(&data, b[0], b[1], b[2]).unwrap().0)
                    / (2.0 * h);
                assert!(
                    (fd - g[k]).abs() < 1e-5 * fd.abs().max(1.0),
                    "{p:?} {k}: {fd} vs {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn kolmogorov_tail() {
        // Q(1.36) is the classic 5% critical value
        assert!((kolmogorov_q(1.358) - 0.05).abs() < 1e-3);
    }
}
