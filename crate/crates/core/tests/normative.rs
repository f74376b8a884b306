mod common;

use common::{normal_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use tgpp::model::{predict_fixed, FittedModel, GpStructure, ModelConfig};
use tgpp::normative::{
    abnormality_prob, auc, compute_snpm, gevd_fit, kolmogorov_q, ks_test_standard_normal,
    model_snpm_with, subject_statistic, subject_statistic_with, GevdCalibration,
};
use tgpp::synthetic::{make_dataset, GenConfig};
use tgpp::{DenseTensor, Error};

fn gumbel_draws(n: usize, mu: f64, sigma: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let u: f64 = r.random_range(f64::EPSILON..1.0);
            mu - sigma * (-u.ln()).ln()
        })
        .collect()
}

#[test]
fn gev_recovers_generating_parameters() {
    let fit = gevd_fit(&gumbel_draws(5000, 0.0, 1.0, 1)).unwrap();
    assert!(fit.location.abs() <= 0.1, "{fit:?}");
    assert!((fit.scale - 1.0).abs() <= 0.1, "{fit:?}");
    assert!(fit.shape.abs() <= 0.1, "{fit:?}");
    let draws = gumbel_draws(200, 0.0, 1.0, 2);
    let small = gevd_fit(&draws).unwrap();
    let max = draws.iter().cloned().fold(f64::MIN, f64::max);
    assert!(small.cdf(max) >= 0.5);
}

#[test]
fn gev_fit_is_location_and_scale_equivariant() {
    let base = gumbel_draws(400, 0.3, 0.7, 3);
    let a = gevd_fit(&base).unwrap();
    let shifted: Vec<f64> = base.iter().map(|v| v + 2.5).collect();
    let b = gevd_fit(&shifted).unwrap();
    assert!((b.location - a.location - 2.5).abs() < 1e-6);
    assert!((b.scale - a.scale).abs() < 1e-6);
    assert!((b.shape - a.shape).abs() < 1e-6);
    let scaled: Vec<f64> = base.iter().map(|v| v * 3.0).collect();
    let c = gevd_fit(&scaled).unwrap();
    assert!((c.location - 3.0 * a.location).abs() < 1e-6);
    assert!((c.scale - 3.0 * a.scale).abs() < 1e-6);
    assert!((c.shape - a.shape).abs() < 1e-6);
}

#[test]
fn gev_fit_input_errors() {
    assert!(matches!(
        gevd_fit(&[1.0; 5]),
        Err(Error::InsufficientData(_))
    ));
    assert!(matches!(
        gevd_fit(&[2.0; 20]),
        Err(Error::InvalidArgument(_))
    ));
    let mut v = gumbel_draws(20, 0.0, 1.0, 4);
    v[3] = f64::NAN;
    assert!(gevd_fit(&v).is_err());
}

fn gumbel(mu: f64, sigma: f64) -> GevdCalibration {
    GevdCalibration {
        location: mu,
        scale: sigma,
        shape: 0.0,
        top_fraction: 0.01,
    }
}

#[test]
fn abnormality_probability_examples() {
    let cal = gumbel(1.0, 2.0);
    assert!((abnormality_prob(&cal, 1.0) - (-1.0f64).exp()).abs() < 1e-12);
    assert_eq!(abnormality_prob(&cal, f64::NEG_INFINITY), 0.0);
    assert!(abnormality_prob(&cal, -1e6) < 1e-300);
    let frechet = GevdCalibration {
        shape: 0.4,
        ..cal.clone()
    };
    assert_eq!(abnormality_prob(&frechet, -10.0), 0.0);
    for c in [
        cal,
        frechet,
        GevdCalibration {
            shape: -0.3,
            ..gumbel(0.0, 1.0)
        },
    ] {
        let probs: Vec<f64> = (0..100)
            .map(|i| abnormality_prob(&c, -10.0 + 0.25 * i as f64))
            .collect();
        assert!(probs.windows(2).all(|w| w[1] >= w[0]));
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        for p in [0.1, 0.5, 0.9] {
            assert!((c.cdf(c.quantile(p)) - p).abs() < 1e-10);
        }
    }
}

#[test]
fn auc_examples() {
    let labels = [false, false, true, true];
    assert_eq!(auc(&labels, &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
    assert_eq!(auc(&labels, &[0.9, 0.8, 0.2, 0.1]).unwrap(), 0.0);
    assert_eq!(auc(&labels, &[0.5; 4]).unwrap(), 0.5);
    assert!(matches!(
        auc(&[true, true], &[0.1, 0.2]),
        Err(Error::InvalidArgument(_))
    ));
    assert!(auc(&labels, &[0.1, 0.2]).is_err());
}

fn all_pairs_auc(labels: &[bool], scores: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn auc_with_tie_matches_pair_counting() {
    let labels = [true, false, true, false, false, true];
    let scores = [0.7, 0.3, 0.5, 0.5, 0.9, 0.8];
    let want = all_pairs_auc(&labels, &scores);
    assert!((auc(&labels, &scores).unwrap() - want).abs() < 1e-15);
    assert!((want - 5.5 / 9.0).abs() < 1e-15);
}

#[test]
fn subject_statistic_examples() {
    let constant = DenseTensor::from_fn(&[3, 4], |_| 1.5).unwrap();
    for f in [0.01, 0.3, 1.0] {
        assert_eq!(subject_statistic(&constant, f).unwrap(), 1.5);
    }
    let spike = DenseTensor::new(vec![8], vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
    assert_eq!(subject_statistic(&spike, 0.1).unwrap(), 5.0);
    let map = normal_tensor(&[6, 6, 6], &mut rng(5));
    let mut sorted = map.data().to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = (0.01f64 * 216.0).ceil() as usize;
    let want = sorted[..k].iter().sum::<f64>() / k as f64;
    assert!((subject_statistic(&map, 0.01).unwrap() - want).abs() < 1e-15);
    let neg = DenseTensor::new(vec![3], vec![-4.0, 1.0, 0.5]).unwrap();
    assert_eq!(subject_statistic_with(&neg, 0.3, true).unwrap(), 4.0);
    assert_eq!(subject_statistic_with(&neg, 0.3, false).unwrap(), 1.0);
    assert!(subject_statistic(&map, 0.0).is_err());
    assert!(subject_statistic(&map, 1.5).is_err());
}

#[test]
fn snpm_examples_and_errors() {
    let y = normal_tensor(&[2, 3, 2], &mut rng(6));
    let ones = DenseTensor::from_fn(&[2, 3, 2], |_| 0.25).unwrap();
    let u = DenseTensor::from_fn(&[3, 2], |_| 0.75).unwrap();
    let z = compute_snpm(&y, &y, &ones, &u).unwrap();
    assert!(z.values.data().iter().all(|v| *v == 0.0));
    let shifted = y.map(|v| v + 2.0);
    let z = compute_snpm(&shifted, &y, &ones, &u).unwrap();
    assert!(z.values.data().iter().all(|v| (v - 2.0).abs() < 1e-12));
    let mut bad_u = u.clone();
    bad_u.data_mut()[4] = -0.25;
    let err = compute_snpm(&shifted, &y, &ones, &bad_u).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    assert!(err.to_string().contains("voxel 4"), "{err}");
    assert!(compute_snpm(&shifted, &y, &ones, &DenseTensor::zeros(&[2, 3]).unwrap()).is_err());
    assert!(compute_snpm(&shifted, &ones.leading_slice(0), &ones, &u).is_err());
}

#[test]
fn kolmogorov_survival_reference_values() {
    assert_eq!(kolmogorov_q(0.0), 1.0);
    assert!((kolmogorov_q(1.0) - 0.26999967).abs() < 1e-6);
    assert!((kolmogorov_q(1.628) - 0.01).abs() < 2e-4);
    let ks = ks_test_standard_normal(&[0.0]).unwrap();
    assert!((ks.statistic - 0.5).abs() < 1e-15);
}

fn well_specified_ks_p_value(seed: u64) -> f64 {
    let mut gen = GenConfig::standard(vec![4, 4, 4]);
    gen.n_test = 500;
    gen.n_calibrate = 1;
    gen.outliers.fraction = 0.0;
    gen.seed = seed;
    let (train, _, test, truth) = make_dataset(&gen).unwrap();
    let structure = GpStructure::new(
        truth.kernels.clone(),
        truth.bases_b.clone(),
        truth.bases_l.clone(),
    )
    .unwrap();
    let fixed = predict_fixed(&train.x, &truth.fixed_effect).unwrap();
    let model = FittedModel::from_parts(
        ModelConfig::new(gen.signal_ranks.clone(), gen.noise_ranks.clone()),
        truth.fixed_effect.clone(),
        structure,
        truth.params.clone(),
        train.x.clone(),
        train.y.sub(&fixed).unwrap(),
    )
    .unwrap();
    let snpm = model_snpm_with(&model, &test, 64, false).unwrap();
    assert_eq!(snpm.values.shape(), &[500, 4, 4, 4]);
    let d = snpm.values.data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!(
        mean.abs() < 0.05 && (var - 1.0).abs() < 0.05,
        "mean {mean}, variance {var}"
    );
    ks_test_standard_normal(d).unwrap().p_value
}

#[test]
fn well_specified_maps_are_standard_normal() {
    let p: Vec<f64> = (0..10).map(well_specified_ks_p_value).collect();
    let passed = p.iter().filter(|&&v| v > 0.01).count();
    assert!(passed >= 8, "KS p-values {p:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn snpm_is_shift_equivariant(seed in any::<u64>(), c in -5.0f64..5.0) {
        let mut r = rng(seed);
        let y = normal_tensor(&[3, 2, 2], &mut r);
        let y_star = normal_tensor(&[3, 2, 2], &mut r);
        let v = normal_tensor(&[3, 2, 2], &mut r).map(|x| x * x + 0.1);
        let u = normal_tensor(&[2, 2], &mut r).map(|x| x * x + 0.1);
        let base = compute_snpm(&y, &y_star, &v, &u).unwrap();
        let sd = DenseTensor::from_fn(&[3, 2, 2], |i| (v.get(i) + u.get(&i[1..])).sqrt()).unwrap();
        let moved = y.add(&sd.map(|s| c * s)).unwrap();
        let out = compute_snpm(&moved, &y_star, &v, &u).unwrap();
        for (a, b) in out.values.data().iter().zip(base.values.data()) {
            prop_assert!((a - b - c).abs() < 1e-10);
        }
    }

    #[test]
    fn score_ignores_voxel_order(seed in any::<u64>(), f in 0.01f64..1.0) {
        let map = normal_tensor(&[24], &mut rng(seed));
        let mut perm = map.data().to_vec();
        perm.reverse();
        perm.rotate_left((seed % 24) as usize);
        let permuted = DenseTensor::new(vec![24], perm).unwrap();
        let cal = gumbel(0.2, 0.8);
        let a = abnormality_prob(&cal, subject_statistic(&map, f).unwrap());
        let b = abnormality_prob(&cal, subject_statistic(&permuted, f).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn auc_is_invariant_to_increasing_transforms(
        scores in prop::collection::vec(-3.0f64..3.0, 4..40),
        flips in prop::collection::vec(any::<bool>(), 40),
    ) {
        let mut labels: Vec<bool> = flips[..scores.len()].to_vec();
        labels[0] = true;
        labels[1] = false;
        let a = auc(&labels, &scores).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| s.exp() * 2.0 + s.powi(3)).collect();
        prop_assert!((auc(&labels, &transformed).unwrap() - a).abs() < 1e-15);
        prop_assert!((a - all_pairs_auc(&labels, &scores)).abs() < 1e-12);
    }
}
