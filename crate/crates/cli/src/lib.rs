//! `tgpp` command line: synth, fit, predict, score, bench and repro over a
//! JSON run configuration.

pub mod bench;
pub mod config;
pub mod error;
pub mod pipeline;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use tgpp::model::{
    aleatoric_variance, fit, fixed_effect_variance, load_model, predict_mean,
    predict_variance_diag, save_model, Dataset, FittedModel,
};
use tgpp::normative::{compute_snpm, model_snpm_with};
use tgpp::synthetic::make_dataset;
use tgpp::{dtf, DenseTensor, Matrix};

pub use config::{load_config, parse_config, RunConfig};
pub use error::CliError;

use config::{derive_seed, DataPaths, STAGE_GENERATOR, STAGE_MODEL};
use pipeline::{mean_sd, run_repeats, score_maps, SubjectScore};

#[derive(Debug, Parser)]
#[command(
    name = "tgpp",
    version,
    about = "Tensor Gaussian predictive process normative modeling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; relative paths inside resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample train / calibrate / test datasets from the generative model.
    Synth(Common),
    /// Fit a model to `data` and write it with its optimization trace.
    Fit(Common),
    /// Predict for `predict.x`; S-NPMs too when `predict.y` is given.
    Predict(Common),
    /// Calibrate on `calibrate`, score `test`, report AUC when labelled.
    Score(Common),
    /// Time efficient and dense likelihood evaluations against `T`.
    Bench(Common),
    /// Run the synthetic protocol repeatedly and summarize AUC.
    Repro {
        #[command(flatten)]
        common: Common,
        /// Number of repeats, overriding the config.
        #[arg(long)]
        repeats: Option<usize>,
    },
}

/// Run the CLI on `argv` (program name first) and return the exit code.
pub fn run(argv: &[String]) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let mut msg = format!("tgpp: error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                msg.push_str(&format!(": {s}"));
                source = s.source();
            }
            eprintln!("{msg}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (common, repeats) = match &cli.command {
        Command::Synth(c)
        | Command::Fit(c)
        | Command::Predict(c)
        | Command::Score(c)
        | Command::Bench(c) => (c, None),
        Command::Repro { common, repeats } => (common, *repeats),
    };
    let needs_config = matches!(
        cli.command,
        Command::Fit(_) | Command::Predict(_) | Command::Score(_)
    );
    let cfg = resolve(common, repeats, needs_config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        fs::create_dir_all(&cfg.out).map_err(|e| output_err(&cfg.out, e))?;
        match cli.command {
            Command::Synth(_) => synth(&cfg),
            Command::Fit(_) => fit_cmd(&cfg),
            Command::Predict(_) => predict(&cfg),
            Command::Score(_) => score(&cfg),
            Command::Bench(_) => bench_cmd(&cfg),
            Command::Repro { .. } => repro(&cfg),
        }
    })
}

/// Load (or default) the config, apply flag overrides, echo it to
/// `config.resolved.json` and resolve its paths.
fn resolve(
    common: &Common,
    repeats: Option<usize>,
    needs_config: bool,
) -> Result<RunConfig, CliError> {
    let (mut cfg, base) = match &common.config {
        Some(path) => {
            let cfg = load_config(path)?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (cfg, base)
        }
        None if needs_config => return Err(CliError::Usage("this command needs --config".into())),
        None => (RunConfig::default(), PathBuf::new()),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = Some(t);
    }
    if let Some(r) = repeats {
        cfg.repro.repeats = r;
    }
    cfg.generator.seed = derive_seed(cfg.seed, STAGE_GENERATOR);
    cfg.model.seed = derive_seed(cfg.seed, STAGE_MODEL);
    cfg.validate()?;
    let echo = serde_json::to_string_pretty(&cfg).expect("config serializes");
    cfg.resolve_paths(&base);
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    fs::create_dir_all(&cfg.out).map_err(|e| output_err(&cfg.out, e))?;
    write_text(&cfg.out.join("config.resolved.json"), &(echo + "\n"))?;
    Ok(cfg)
}

fn output_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Output {
        path: path.display().to_string(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| output_err(path, e))
}

fn write_tensor(path: &Path, t: &DenseTensor) -> Result<(), CliError> {
    dtf::write_file(path, t).map_err(|e| match e {
        tgpp::Error::Io(io) => output_err(path, io),
        other => CliError::Model(other),
    })
}

fn read_tensor(path: &Path) -> Result<DenseTensor, CliError> {
    dtf::read_file(path).map_err(|source| CliError::Input {
        path: path.display().to_string(),
        source,
    })
}

fn read_covariates(path: &Path) -> Result<Matrix, CliError> {
    let t = read_tensor(path)?;
    if t.order() != 2 {
        return Err(CliError::Input {
            path: path.display().to_string(),
            source: tgpp::Error::InvalidShape(format!(
                "covariates must be N x F, got {:?}",
                t.shape()
            )),
        });
    }
    Ok(Matrix::from_row_slice(t.shape()[0], t.shape()[1], t.data()))
}

fn read_dataset(paths: &DataPaths, section: &str) -> Result<Dataset, CliError> {
    let x = read_covariates(&paths.x)?;
    let y_path = paths
        .y
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("{section}.y is required")))?;
    let y = read_tensor(y_path)?;
    Dataset::new(x, y).map_err(|source| CliError::Input {
        path: y_path.display().to_string(),
        source,
    })
}

fn section<'a>(value: &'a Option<DataPaths>, name: &str) -> Result<&'a DataPaths, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("missing section `{name}`")))
}

fn read_model(path: &Path) -> Result<FittedModel, CliError> {
    load_model(path).map_err(|source| CliError::Input {
        path: path.display().to_string(),
        source,
    })
}

fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let (train, calibrate, test, truth) = make_dataset(&cfg.generator)?;
    for (name, d) in [
        ("train", &train),
        ("calibrate", &calibrate),
        ("test", &test),
    ] {
        write_tensor(
            &cfg.out.join(format!("{name}_x.dtf")),
            &DenseTensor::from_matrix(&d.x),
        )?;
        write_tensor(&cfg.out.join(format!("{name}_y.dtf")), &d.y)?;
    }
    let labels: Vec<f64> = truth
        .labels
        .iter()
        .map(|&l| if l { 1.0 } else { 0.0 })
        .collect();
    write_tensor(
        &cfg.out.join("test_labels.dtf"),
        &DenseTensor::new(vec![labels.len()], labels)?,
    )?;
    write_tensor(&cfg.out.join("truth_fixed_effect.dtf"), &truth.fixed_effect)?;
    write_text(&cfg.out.join("truth.txt"), &truth.manifest(&cfg.generator))?;
    println!(
        "wrote {} / {} / {} subjects of shape {:?} to {}",
        train.n_subjects(),
        calibrate.n_subjects(),
        test.n_subjects(),
        cfg.generator.shape,
        cfg.out.display()
    );
    Ok(())
}

fn fit_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let data = read_dataset(section(&cfg.data, "data")?, "data")?;
    cfg.model
        .validate(Some(data.extents()))
        .map_err(|e| CliError::Config(format!("model: {e}")))?;
    let model = fit(&data, &cfg.model)?;
    let path = cfg.out.join("model.tgpm");
    save_model(&path, &model).map_err(|e| match e {
        tgpp::Error::Io(io) => output_err(&path, io),
        other => CliError::Model(other),
    })?;
    let report = model.report.as_ref().expect("fit attaches a report");
    let mut trace = String::from("iteration,lml,grad_norm\n");
    for e in &report.trace {
        trace.push_str(&format!("{},{},{}\n", e.iteration, e.value, e.grad_norm));
    }
    write_text(&cfg.out.join("trace.csv"), &trace)?;
    println!(
        "LML {:.6} -> {:.6} after {} iterations ({:?}), gradient norm {:.3e}",
        report.initial_lml, report.final_lml, report.iterations, report.exit, report.grad_norm
    );
    Ok(())
}

fn predict(cfg: &RunConfig) -> Result<(), CliError> {
    let model = read_model(&cfg.model_file)?;
    let paths = section(&cfg.predict, "predict")?;
    let x = read_covariates(&paths.x)?;
    let mean = model.predict_fixed(&x)?.add(&predict_mean(&model, &x)?)?;
    let mut var = predict_variance_diag(&model, &x, cfg.scoring.batch_size)?;
    if cfg.scoring.fixed_effect_uncertainty {
        var = var.add(&fixed_effect_variance(&model, &x)?)?;
    }
    let u = aleatoric_variance(&model)?;
    write_tensor(&cfg.out.join("mean.dtf"), &mean)?;
    write_tensor(&cfg.out.join("variance.dtf"), &var)?;
    write_tensor(&cfg.out.join("aleatoric.dtf"), &u)?;
    if paths.y.is_some() {
        let d = read_dataset(paths, "predict")?;
        let snpm = compute_snpm(&d.y, &mean, &var, &u)?;
        write_tensor(&cfg.out.join("snpm.dtf"), &snpm.values)?;
    }
    println!("predicted {} subjects", x.nrows());
    Ok(())
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<bool>, CliError> {
    let t = read_tensor(path)?;
    let bad = |msg: String| CliError::Input {
        path: path.display().to_string(),
        source: tgpp::Error::InvalidArgument(msg),
    };
    if t.order() != 1 || t.len() != n {
        return Err(bad(format!(
            "expected {n} labels, got shape {:?}",
            t.shape()
        )));
    }
    t.data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            v => Err(bad(format!("label {v} is neither 0 nor 1"))),
        })
        .collect()
}

fn scores_csv(scores: &[SubjectScore]) -> String {
    let mut out = String::from("subject_id,statistic,abnormality_prob,label\n");
    for s in scores {
        let label = s.label.map(|l| if l { "1" } else { "0" }).unwrap_or("");
        out.push_str(&format!(
            "{},{},{},{label}\n",
            s.subject, s.statistic, s.probability
        ));
    }
    out
}

fn score(cfg: &RunConfig) -> Result<(), CliError> {
    let model = read_model(&cfg.model_file)?;
    let cal = read_dataset(section(&cfg.calibrate, "calibrate")?, "calibrate")?;
    let test = read_dataset(section(&cfg.test, "test")?, "test")?;
    let labels = cfg
        .labels
        .as_ref()
        .map(|p| read_labels(p, test.n_subjects()))
        .transpose()?;
    let opts = &cfg.scoring;
    let cal_map = model_snpm_with(&model, &cal, opts.batch_size, opts.fixed_effect_uncertainty)?;
    let test_map = model_snpm_with(
        &model,
        &test,
        opts.batch_size,
        opts.fixed_effect_uncertainty,
    )?;
    let (gev, scores, area) = score_maps(&cal_map, &test_map, labels.as_deref(), opts)?;
    write_text(&cfg.out.join("scores.csv"), &scores_csv(&scores))?;
    let gev_json = serde_json::to_string_pretty(&gev).expect("calibration serializes");
    write_text(&cfg.out.join("gev.json"), &(gev_json + "\n"))?;
    write_tensor(&cfg.out.join("test_snpm.dtf"), &test_map.values)?;
    match area {
        Some(a) => println!("AUC {a:.4} over {} subjects", scores.len()),
        None => println!("scored {} subjects", scores.len()),
    }
    Ok(())
}

fn bench_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let rows = bench::run_bench(&cfg.bench, cfg.generator.seed)?;
    write_text(&cfg.out.join("bench.csv"), &bench::to_csv(&rows))?;
    let (eff, naive) = bench::exponents(&rows);
    match naive {
        Some(n) => println!("log-log exponent: efficient {eff:.3}, naive {n:.3}"),
        None => println!("log-log exponent: efficient {eff:.3}"),
    }
    Ok(())
}

fn repro(cfg: &RunConfig) -> Result<(), CliError> {
    let outcomes = run_repeats(cfg)?;
    let mut csv = String::from("repeat,seed,ks_statistic,ks_p_value,auc,baseline_auc,lml\n");
    let opt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
    for o in &outcomes {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            o.repeat,
            o.seed,
            o.ks.statistic,
            o.ks.p_value,
            opt(o.auc),
            opt(o.baseline_auc),
            o.final_lml
        ));
    }
    write_text(&cfg.out.join("repro.csv"), &csv)?;
    let aucs: Vec<f64> = outcomes.iter().filter_map(|o| o.auc).collect();
    let base: Vec<f64> = outcomes.iter().filter_map(|o| o.baseline_auc).collect();
    let ks_pass = outcomes.iter().filter(|o| o.ks.p_value >= 0.01).count();
    match mean_sd(&aucs) {
        Some((m, s)) => println!("AUC {m:.4} ± {s:.4} over {} repeats", aucs.len()),
        None => println!("AUC undefined (no abnormal test subjects)"),
    }
    if let Some((m, s)) = mean_sd(&base) {
        println!("baseline AUC {m:.4} ± {s:.4}");
    }
    println!(
        "KS calibration passed in {ks_pass} of {} repeats (alpha 0.01)",
        outcomes.len()
    );
    Ok(())
}
