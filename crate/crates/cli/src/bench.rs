//! Wall-clock scaling of the efficient and dense likelihoods in `T`.

use std::time::Instant;

use tgpp::alloc_track;
use tgpp::model::{efficient_lml, initial_params, naive_lml, prepare, FittedModel, ModelConfig};
use tgpp::synthetic::{make_dataset, GenConfig};
use tgpp::Result;

use crate::config::BenchConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub t: usize,
    /// Part of the efficient sweep (not only timed for the dense path).
    pub in_sweep: bool,
    pub naive_seconds: Option<f64>,
    pub efficient_seconds: f64,
    /// Largest single allocation during one efficient evaluation, in bytes;
    /// `None` unless the tracking allocator is installed.
    pub peak_alloc: Option<usize>,
}

fn problem(
    n: usize,
    shape: &[usize],
    ranks: &[usize],
    seed: u64,
) -> Result<(tgpp::model::Dataset, FittedModel)> {
    let mut gen = GenConfig::standard(shape.to_vec());
    gen.n_train = n;
    gen.n_calibrate = 1;
    gen.n_test = 1;
    gen.signal_ranks = ranks.to_vec();
    gen.noise_ranks = ranks.to_vec();
    gen.outliers.fraction = 0.0;
    gen.seed = seed;
    let (train, _, _, _) = make_dataset(&gen)?;
    let cfg = ModelConfig::new(ranks.to_vec(), ranks.to_vec());
    let (structure, fixed, residual) = prepare(&train, &cfg)?;
    let raw = initial_params(structure.layout().total, seed);
    let model = FittedModel::from_parts(cfg, fixed, structure, raw, train.x.clone(), residual)?;
    Ok((train, model))
}

fn best_of(repeats: usize, mut f: impl FnMut() -> Result<f64>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// One row per distinct `T`, sorted by `T`.
pub fn run_bench(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    let mut shapes: Vec<(Vec<usize>, bool, bool)> = cfg
        .efficient_shapes
        .iter()
        .map(|s| (s.clone(), true, false))
        .collect();
    for s in &cfg.naive_shapes {
        match shapes.iter_mut().find(|(e, _, _)| e == s) {
            Some(entry) => entry.2 = true,
            None => shapes.push((s.clone(), false, true)),
        }
    }
    shapes.sort_by_key(|(s, _, _)| s.iter().product::<usize>());
    let mut rows = Vec::with_capacity(shapes.len());
    for (shape, in_sweep, naive) in shapes {
        let t: usize = shape.iter().product();
        let (data, model) = problem(cfg.n_subjects, &shape, &cfg.ranks, seed)?;
        let efficient_seconds = best_of(cfg.repeats, || efficient_lml(&data, &model))?;
        let naive_seconds = if naive {
            Some(best_of(cfg.repeats, || naive_lml(&data, &model))?)
        } else {
            None
        };
        let peak_alloc = if alloc_track::is_installed() {
            let (value, peak) = alloc_track::track_max_allocation(|| efficient_lml(&data, &model));
            value?;
            Some(peak)
        } else {
            None
        };
        log::info!("T = {t}: efficient {efficient_seconds:.4e} s, naive {naive_seconds:?}");
        rows.push(BenchRow {
            t,
            in_sweep,
            naive_seconds,
            efficient_seconds,
            peak_alloc,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// `(efficient exponent over the sweep, naive exponent)`; the latter is
/// `None` with fewer than two dense timings.
pub fn exponents(rows: &[BenchRow]) -> (f64, Option<f64>) {
    let eff: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.in_sweep)
        .map(|r| (r.t as f64, r.efficient_seconds))
        .collect();
    let naive: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.naive_seconds.map(|s| (r.t as f64, s)))
        .collect();
    (
        loglog_slope(&eff),
        (naive.len() >= 2).then(|| loglog_slope(&naive)),
    )
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("T,naive_seconds,efficient_seconds,peak_alloc\n");
    for r in rows {
        let naive = r
            .naive_seconds
            .map(|s| format!("{s:.6e}"))
            .unwrap_or_default();
        let peak = r.peak_alloc.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{naive},{:.6e},{peak}\n",
            r.t, r.efficient_seconds
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&x: &f64| (x, 3.0 * x.powf(2.5)))
            .collect();
        assert!((loglog_slope(&pts) - 2.5).abs() < 1e-12);
    }
}
