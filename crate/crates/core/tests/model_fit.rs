mod common;

use common::{normal_matrix, normal_tensor, random_instance, rng};
use tgpp::kernels::{kernel_cross, kernel_self, InputKind, KernelParams, KernelSpec};
use tgpp::model::fit_fixed_effect_with;
use tgpp::model::naive::dense_covariance;
use tgpp::model::st_gpr::single_output_predict;
use tgpp::model::{
    fit, fit_fixed_effect, fixed_effect_variance, read_model, st_gpr_fit_predict,
    st_gpr_parameter_count, write_model, Dataset, FittedModel, ModelConfig, StGprSettings,
};
use tgpp::synthetic::{make_dataset, GenConfig};
use tgpp::tensor::kron_all;
use tgpp::{DenseTensor, Error, Matrix, Vector};

fn dataset(x: Matrix, y: DenseTensor) -> Dataset {
    Dataset::new(x, y).unwrap()
}

#[test]
fn identity_design_reproduces_data() {
    let y = normal_tensor(&[4, 3, 2], &mut rng(1));
    let a = fit_fixed_effect(&dataset(Matrix::identity(4, 4), y.clone())).unwrap();
    assert_eq!(a.shape(), y.shape());
    let diff = a.sub(&y).unwrap();
    assert!(diff.data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn intercept_only_gives_voxel_means() {
    let y = normal_tensor(&[5, 2, 3], &mut rng(2));
    let a = fit_fixed_effect(&dataset(Matrix::from_element(5, 1, 1.0), y.clone())).unwrap();
    assert_eq!(a.shape(), &[1, 2, 3]);
    for v in 0..6 {
        let mean = (0..5).map(|n| y.data()[n * 6 + v]).sum::<f64>() / 5.0;
        assert!((a.data()[v] - mean).abs() < 1e-12);
    }
}

#[test]
fn matches_normal_equations_per_voxel() {
    let mut r = rng(3);
    let x = normal_matrix(8, 3, &mut r);
    let y = normal_tensor(&[8, 2, 2], &mut r);
    let a = fit_fixed_effect(&dataset(x.clone(), y.clone())).unwrap();
    let gram_inv = (x.transpose() * &x).try_inverse().unwrap();
    for v in 0..4 {
        let yv = Vector::from_fn(8, |n, _| y.data()[n * 4 + v]);
        let want = &gram_inv * (x.transpose() * &yv);
        for f in 0..3 {
            assert!((a.data()[f * 4 + v] - want[f]).abs() < 1e-10);
        }
        let resid = &yv - &x * Vector::from_fn(3, |f, _| a.data()[f * 4 + v]);
        assert!((x.transpose() * resid).abs().max() < 1e-8 * yv.norm().max(1.0));
    }
}

#[test]
fn rank_deficient_design() {
    let mut x = normal_matrix(6, 3, &mut rng(4));
    let c0 = x.column(0).into_owned();
    x.set_column(2, &(c0 * 2.0));
    let y = normal_tensor(&[6, 3], &mut rng(5));
    assert!(matches!(
        fit_fixed_effect_with(&x, &y, false),
        Err(Error::RankDeficient { .. })
    ));
    let a = fit_fixed_effect_with(&x, &y, true).unwrap();
    assert!(a.data().iter().all(|v| v.is_finite()));
    let wide = normal_matrix(2, 3, &mut rng(6));
    assert!(fit_fixed_effect_with(&wide, &normal_tensor(&[2, 3], &mut rng(7)), false).is_err());
}

fn small_generated(seed: u64) -> (Dataset, ModelConfig, GenConfig) {
    let mut gen = GenConfig::standard(vec![4, 4, 4]);
    gen.seed = seed;
    gen.n_calibrate = 1;
    gen.n_test = 1;
    gen.outliers.fraction = 0.0;
    let (train, _, _, _) = make_dataset(&gen).unwrap();
    let mut cfg = ModelConfig::new(vec![2, 2, 2], vec![1, 1, 1]);
    cfg.seed = seed;
    (train, cfg, gen)
}

#[test]
fn fit_reaches_generating_likelihood() {
    let (train, cfg, gen) = small_generated(11);
    assert_eq!(train.n_subjects(), 40);
    let model = fit(&train, &cfg).unwrap();
    let (_, _, _, truth) = make_dataset(&gen).unwrap();
    let at_truth = model.with_params(truth.params.clone()).unwrap().train_lml();
    let report = model.report.as_ref().unwrap();
    assert!(report.final_lml >= report.initial_lml);
    assert!(
        model.train_lml() >= at_truth - 1e-6,
        "fitted {} < generating {}",
        model.train_lml(),
        at_truth
    );
}

#[test]
fn fit_is_deterministic() {
    let (train, cfg, _) = small_generated(12);
    let a = fit(&train, &cfg).unwrap();
    let b = fit(&train, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.report, b.report);
}

fn signal_to_noise(model: &FittedModel) -> f64 {
    let sp = &model.cache().spectral;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    mean(sp.s_r())
        * (0..sp.c_tilde.len())
            .map(|i| mean(sp.s_c(i)))
            .product::<f64>()
}

#[test]
fn white_noise_shrinks_signal_eigenvalues() {
    let mut r = rng(13);
    let x = normal_matrix(30, 2, &mut r);
    let y = normal_tensor(&[30, 4, 4], &mut r);
    let cfg = ModelConfig::new(vec![2, 2], vec![2, 2]);
    let noise = fit(&dataset(x, y), &cfg).unwrap();
    let (train, cfg, _) = small_generated(13);
    let structured = fit(&train, &cfg).unwrap();
    let (snr_noise, snr_signal) = (signal_to_noise(&noise), signal_to_noise(&structured));
    assert!(snr_noise < 1.0, "white-noise signal ratio {snr_noise}");
    assert!(snr_signal > 10.0 * snr_noise);
}

#[test]
fn model_file_round_trip() {
    let (train, cfg, _) = small_generated(14);
    let model = fit(&train, &cfg).unwrap();
    let mut buf = Vec::new();
    write_model(&mut buf, &model).unwrap();
    let back = read_model(&mut buf.as_slice()).unwrap();
    assert_eq!(back.params, model.params);
    assert_eq!(back.fixed_effect, model.fixed_effect);
    assert_eq!(back.config.kernel_set(), model.config.kernel_set());
    assert_eq!(back.config.ranks_p, model.config.ranks_p);
    assert_eq!(back.config.ranks_q, model.config.ranks_q);
    assert_eq!(back.train_lml(), model.train_lml());
    let mut again = Vec::new();
    write_model(&mut again, &back).unwrap();
    assert_eq!(buf, again);
    assert!(read_model(&mut &buf[..buf.len() / 2]).is_err());
}

#[test]
fn fixed_effect_variance_matches_dense_oracle() {
    for seed in 0..12 {
        let inst = random_instance(seed);
        let model = &inst.model;
        let v = fixed_effect_variance(model, &inst.x_star).unwrap();
        let parts = &model.cache().parts;
        let k = dense_covariance(parts).unwrap();
        let k_inv = k.clone().try_inverse().unwrap();
        let d = kron_all(&parts.signal);
        let x = &model.train_x;
        let (n, f) = x.shape();
        let t = d.nrows();
        let xm = x * (x.transpose() * x).try_inverse().unwrap();
        let r_star = model.r_star(&inst.x_star).unwrap();
        for s in 0..inst.x_star.nrows() {
            for j in 0..t {
                let k_star = Vector::from_fn(n * t, |i, _| r_star[(s, i / t)] * d[(j, i % t)]);
                let g = &k_inv * k_star;
                let delta = Vector::from_fn(n * t, |i, _| {
                    let (a, tt) = (i / t, i % t);
                    (0..f)
                        .map(|c| {
                            let xg: f64 = (0..n).map(|b| x[(b, c)] * g[b * t + tt]).sum();
                            let lifted = if tt == j { inst.x_star[(s, c)] } else { 0.0 };
                            xm[(a, c)] * (lifted - xg)
                        })
                        .sum()
                });
                let want = (delta.transpose() * &k * &delta)[0];
                let got = v.data()[s * t + j];
                assert!(
                    (got - want).abs() <= 1e-8 * want.abs().max(1.0),
                    "seed {seed}: {got} vs {want}"
                );
            }
        }
    }
}

fn composite() -> KernelSpec {
    KernelSpec::composite(InputKind::FeatureRows)
}

#[test]
fn single_output_matches_closed_form() {
    let mut r = rng(17);
    let x = normal_matrix(7, 2, &mut r);
    let xs = normal_matrix(3, 2, &mut r);
    let y: Vec<f64> = normal_matrix(7, 1, &mut r).iter().copied().collect();
    let raw = vec![-0.3, 0.2, 0.1, -1.0, -0.7];
    let (mean, var) = single_output_predict(&composite(), &x, &y, &xs, &raw).unwrap();
    let kp = KernelParams::new(raw[..4].to_vec());
    let noise = raw[4].exp();
    let k = kernel_self(&composite(), &kp, &x).unwrap() + Matrix::identity(7, 7) * noise;
    let inv = k.try_inverse().unwrap();
    let ks = kernel_cross(&composite(), &kp, &xs, &x).unwrap();
    let kss = kernel_self(&composite(), &kp, &xs).unwrap();
    let want_mean = &ks * &inv * Vector::from_vec(y);
    let want_cov = &kss - &ks * &inv * ks.transpose();
    for i in 0..3 {
        assert!((mean[i] - want_mean[i]).abs() <= 1e-8 * want_mean[i].abs().max(1.0));
        let wv = want_cov[(i, i)] + noise;
        assert!((var[i] - wv).abs() <= 1e-8 * wv);
    }
}

#[test]
fn zero_signal_kernel_gives_prior() {
    let spec = KernelSpec::diagonal(InputKind::FeatureRows);
    let mut r = rng(18);
    let x = normal_matrix(5, 2, &mut r);
    let xs = normal_matrix(2, 2, &mut r);
    let y: Vec<f64> = normal_matrix(5, 1, &mut r).iter().copied().collect();
    let (prior, noise) = (0.8f64, 0.3f64);
    let (mean, var) = single_output_predict(&spec, &x, &y, &xs, &[prior.ln(), noise.ln()]).unwrap();
    for i in 0..2 {
        assert!(mean[i].abs() < 1e-12);
        assert!((var[i] - (prior + noise)).abs() < 1e-12);
    }
}

#[test]
fn mass_univariate_baseline() {
    let mut r = rng(19);
    let x = normal_matrix(12, 2, &mut r);
    let y = normal_tensor(&[12, 3, 2], &mut r);
    let xs = normal_matrix(4, 2, &mut r);
    let d = dataset(x, y);
    let out = st_gpr_fit_predict(&d, &xs, &composite(), &StGprSettings::default()).unwrap();
    assert_eq!(out.mean.shape(), &[4, 3, 2]);
    assert_eq!(out.var.shape(), &[4, 3, 2]);
    assert!(out.var.data().iter().all(|v| *v > 0.0));
    assert_eq!(out.params.len(), 6);
    let total: usize = out.params.iter().map(Vec::len).sum();
    assert_eq!(total, st_gpr_parameter_count(&composite(), 6));
    assert_eq!(st_gpr_parameter_count(&composite(), 119_560), 5 * 119_560);
    assert!(out.failed.is_empty());
}
