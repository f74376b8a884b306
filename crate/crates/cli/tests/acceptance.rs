#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{max_abs_diff, random_instance, rel_err, rng, Instance};
use rand::Rng;
use tgpp::alloc_track::TrackingAllocator;
use tgpp::kernels::{InputKind, KernelSpec};
use tgpp::model::{
    efficient_lml, lml_gradient, naive_lml, naive_predict, predict_mean, predict_variance_diag,
    st_gpr_parameter_count, ModelConfig, ParamBlock,
};
use tgpp::normative::{abnormality_prob, gevd_fit};
use tgpp_cli::bench::{exponents, run_bench};
use tgpp_cli::config::BenchConfig;
use tgpp_cli::pipeline::{mean_sd, run_repeats};
use tgpp_cli::RunConfig;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

const INSTANCES: u64 = 60;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(budget_secs: u64, start: Instant) -> (bool, Duration) {
    let e = start.elapsed();
    (e <= Duration::from_secs(budget_secs), e)
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let (mut worst_lml, mut worst_mean, mut worst_var) = (0.0f64, 0.0f64, 0.0f64);
    let mut dims = [false; 3];
    let mut ranks = [false; 2];
    for seed in 0..INSTANCES {
        let inst = random_instance(seed);
        dims[inst.ranks_p.len() - 1] = true;
        let full = inst
            .ranks_p
            .iter()
            .zip(inst.model.extents())
            .all(|(p, t)| *p == t);
        ranks[full as usize] = true;
        let e = efficient_lml(&inst.data, &inst.model).unwrap();
        let n = naive_lml(&inst.data, &inst.model).unwrap();
        worst_lml = worst_lml.max(rel_err(e, n));
        let mean = predict_mean(&inst.model, &inst.x_star).unwrap();
        let var = predict_variance_diag(&inst.model, &inst.x_star, 5).unwrap();
        let (dm, dv) = naive_predict(&inst.model, &inst.x_star).unwrap();
        let scale = dm.data().iter().fold(1.0f64, |a, v| a.max(v.abs()));
        worst_mean = worst_mean.max(max_abs_diff(&mean, &dm) / scale);
        worst_var = worst_var.max(max_abs_diff(&var, &dv.map(|v| v.max(0.0))));
    }
    let (fast, e) = within(120, start);
    check(
        worst_lml < 1e-8 && worst_mean < 1e-8 && worst_var < 1e-8 && fast && dims == [true; 3] && ranks == [true; 2],
        format!(
            "{INSTANCES} instances, max rel LML error {worst_lml:.1e}, mean {worst_mean:.1e}, variance {worst_var:.1e}, {:.1} s",
            e.as_secs_f64()
        ),
    )
}

fn worst_fd_error(inst: &Instance, worst: &mut [f64; 4]) {
    let g = lml_gradient(&inst.data, &inst.model).unwrap();
    let layout = inst.model.structure.layout();
    let h = 1e-6;
    for k in 0..g.len() {
        let eval = |delta: f64| {
            let mut raw = inst.model.params.clone();
            raw[k] += delta;
            efficient_lml(&inst.data, &inst.model.with_params(raw).unwrap()).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let ratio = (g[k] - fd).abs() / (1e-4 * fd.abs()).max(1e-7);
        let block = match layout.block_of(k).unwrap().0 {
            ParamBlock::R => 0,
            ParamBlock::Omega => 1,
            ParamBlock::C(_) => 2,
            ParamBlock::Sigma(_) => 3,
        };
        worst[block] = worst[block].max(ratio);
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 4];
    for seed in 0..INSTANCES {
        worst_fd_error(&random_instance(seed), &mut worst);
    }
    let (fast, e) = within(120, start);
    check(
        worst.iter().all(|w| *w <= 1.0) && fast,
        format!(
            "worst error / tolerance: R {:.2}, Omega {:.2}, C {:.2}, Sigma {:.2}; {:.1} s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            e.as_secs_f64()
        ),
    )
}

fn scaling() -> Outcome {
    let start = Instant::now();
    let cfg = BenchConfig::default();
    let rows = run_bench(&cfg, 5).unwrap();
    let (eff, naive) = exponents(&rows);
    let naive = naive.unwrap_or(f64::NAN);
    let n = cfg.n_subjects;
    let mut linear_memory = true;
    let mut largest = (0, 0);
    for r in rows.iter().filter(|r| r.in_sweep) {
        let peak = r.peak_alloc.unwrap_or(usize::MAX);
        let bound = 4 * (n * n).max(n * r.t) * std::mem::size_of::<f64>();
        linear_memory &= peak <= bound && peak < r.t * r.t * std::mem::size_of::<f64>();
        if r.t > largest.0 {
            largest = (r.t, peak);
        }
    }
    let (fast, e) = within(600, start);
    check(
        eff <= 2.3 && naive >= 2.7 && linear_memory && fast,
        format!(
            "efficient exponent {eff:.2}, dense exponent {naive:.2}, largest allocation {} bytes at T = {}, {:.1} s",
            largest.1,
            largest.0,
            e.as_secs_f64()
        ),
    )
}

fn parameter_accounting() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::new(vec![3, 3, 3], vec![2, 2, 2]);
    let composite = KernelSpec::composite(InputKind::FeatureRows);
    let params = cfg.parameter_count();
    let hyper = cfg.hyperparameter_count();
    let per_output = [216usize, 119_560]
        .iter()
        .all(|&t| st_gpr_parameter_count(&composite, t) == 5 * t);
    let (fast, _) = within(1, start);
    check(
        params == 29 && hyper == 6 && per_output && fast,
        format!(
            "{params} parameters, {hyper} hyperparameters, baseline 5 per output: {per_output}"
        ),
    )
}

fn calibration() -> Outcome {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.generator.outliers.fraction = 0.0;
    cfg.repro.repeats = 10;
    cfg.repro.baseline = false;
    let runs = run_repeats(&cfg).unwrap();
    let p: Vec<f64> = runs.iter().map(|r| r.ks.p_value).collect();
    let passed = p.iter().filter(|&&v| v > 0.01).count();
    let min_p = p.iter().cloned().fold(f64::INFINITY, f64::min);
    let (fast, e) = within(600, start);
    check(
        passed >= 8 && fast,
        format!(
            "KS passed in {passed} of 10 repeats (smallest p {min_p:.4}), {:.1} s",
            e.as_secs_f64()
        ),
    )
}

fn detection() -> Outcome {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.repro.repeats = 10;
    let runs = run_repeats(&cfg).unwrap();
    let ours: Vec<f64> = runs.iter().filter_map(|r| r.auc).collect();
    let base: Vec<f64> = runs.iter().filter_map(|r| r.baseline_auc).collect();
    let (m, sd) = mean_sd(&ours).unwrap_or((f64::NAN, f64::NAN));
    let (bm, bsd) = mean_sd(&base).unwrap_or((f64::NAN, f64::NAN));
    let (fast, e) = within(1800, start);
    check(
        ours.len() == 10 && base.len() == 10 && m >= 0.90 && m - bm > 0.0 && fast,
        format!(
            "mean AUC {m:.4} ± {sd:.4}, baseline {bm:.4} ± {bsd:.4}, margin {:.4}, {:.1} s",
            m - bm,
            e.as_secs_f64()
        ),
    )
}

fn gev_self_consistency() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let draws: Vec<f64> = (0..5000)
        .map(|_| -(-r.random_range(f64::EPSILON..1.0f64).ln()).ln())
        .collect();
    let fit = gevd_fit(&draws).unwrap();
    let recovered =
        fit.location.abs() <= 0.1 && (fit.scale - 1.0).abs() <= 0.1 && fit.shape.abs() <= 0.1;
    let grid: Vec<f64> = (0..100)
        .map(|i| abnormality_prob(&fit, -4.0 + 0.12 * i as f64))
        .collect();
    let monotone = grid.windows(2).all(|w| w[1] >= w[0]);
    let (fast, e) = within(10, start);
    check(
        recovered && monotone && fast,
        format!(
            "location {:.3}, scale {:.3}, shape {:.3}, monotone {monotone}, {:.2} s",
            fit.location,
            fit.scale,
            fit.shape,
            e.as_secs_f64()
        ),
    )
}

const SMALL_CONFIG: &str = r#"{
  "seed": 3,
  "generator": {
    "n_train": 20, "n_calibrate": 20, "n_test": 20,
    "shape": [4, 3, 3], "signal_ranks": [2, 2, 2], "noise_ranks": [2, 2, 2]
  },
  "model": {"ranks_p": [2, 2, 2], "ranks_q": [2, 2, 2]},
  "data": {"x": "synth/train_x.dtf", "y": "synth/train_y.dtf"},
  "model_file": "fit/model.tgpm",
  "predict": {"x": "synth/test_x.dtf", "y": "synth/test_y.dtf"},
  "calibrate": {"x": "synth/calibrate_x.dtf", "y": "synth/calibrate_y.dtf"},
  "test": {"x": "synth/test_x.dtf", "y": "synth/test_y.dtf"},
  "labels": "synth/test_labels.dtf",
  "repro": {"repeats": 2, "baseline": true}
}"#;

fn run_all_commands(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let config = dir.join("config.json");
    fs::write(&config, SMALL_CONFIG).unwrap();
    for cmd in ["synth", "fit", "predict", "score", "repro"] {
        let argv: Vec<String> = [
            "tgpp",
            cmd,
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.join(cmd).to_str().unwrap(),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(tgpp_cli::run(&argv), 0, "{cmd} failed");
    }
    let mut files = Vec::new();
    for cmd in ["synth", "fit", "predict", "score", "repro"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(cmd))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        for name in names {
            let bytes = fs::read(dir.join(cmd).join(&name)).unwrap();
            files.push((format!("{cmd}/{name}"), bytes));
        }
    }
    files
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = run_all_commands(a.path());
    let fb = run_all_commands(b.path());
    let names: Vec<&String> = fa.iter().map(|(n, _)| n).collect();
    let differing: Vec<&String> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| &x.0)
        .collect();
    check(
        fa.len() == fb.len() && differing.is_empty() && !fa.is_empty(),
        format!(
            "{} output files from synth, fit, predict, score, repro; differing: {differing:?}",
            names.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_suite),
        ("scaling", scaling),
        ("parameter accounting", parameter_accounting),
        ("well-specified calibration", calibration),
        ("detection", detection),
        ("GEV self-consistency", gev_self_consistency),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let o = f();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {} ({name}): {status}: {}", i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
