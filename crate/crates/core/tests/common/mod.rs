#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tgpp::factorization::FactorBasis;
use tgpp::model::{Dataset, FittedModel, GpStructure, KernelSet, ModelConfig};
use tgpp::{DenseTensor, Matrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

pub fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
    let n = shape.iter().product();
    DenseTensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
    .unwrap()
}

pub fn orthonormal(t: usize, r: usize, rng: &mut ChaCha8Rng) -> Matrix {
    normal_matrix(t, r, rng).qr().q().columns(0, r).into_owned()
}

pub fn spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = normal_matrix(n, n, rng);
    &g * g.transpose() + Matrix::identity(n, n) * 0.1
}

/// A small model with random bases and parameters whose training data is the
/// given residual (zero fixed effect).
pub struct Instance {
    pub model: FittedModel,
    pub data: Dataset,
    pub x_star: Matrix,
    pub ranks_p: Vec<usize>,
    pub ranks_q: Vec<usize>,
}

pub fn instance(
    n: usize,
    extents: &[usize],
    ranks_p: &[usize],
    ranks_q: &[usize],
    n_star: usize,
    rng: &mut ChaCha8Rng,
) -> Instance {
    let f = rng.random_range(1..=3);
    let x = normal_matrix(n, f, rng);
    let x_star = normal_matrix(n_star, f, rng);
    let b = FactorBasis::new(
        extents
            .iter()
            .zip(ranks_p)
            .map(|(&t, &p)| orthonormal(t, p, rng))
            .collect(),
    )
    .unwrap();
    let l = FactorBasis::new(
        extents
            .iter()
            .zip(ranks_q)
            .map(|(&t, &q)| orthonormal(t, q, rng))
            .collect(),
    )
    .unwrap();
    let kernels = KernelSet::standard(extents.len());
    let structure = GpStructure::new(kernels, b, l).unwrap();
    let params: Vec<f64> = (0..structure.layout().total)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    let mut shape = vec![n];
    shape.extend(extents);
    let y = normal_tensor(&shape, rng);
    let mut a_shape = vec![f];
    a_shape.extend(extents);
    let cfg = ModelConfig::new(ranks_p.to_vec(), ranks_q.to_vec());
    let model = FittedModel::from_parts(
        cfg,
        DenseTensor::zeros(&a_shape).unwrap(),
        structure,
        params,
        x.clone(),
        y.clone(),
    )
    .unwrap();
    Instance {
        model,
        data: Dataset::new(x, y).unwrap(),
        x_star,
        ranks_p: ranks_p.to_vec(),
        ranks_q: ranks_q.to_vec(),
    }
}

/// Random instance with `N <= 8`, `T <= 48`, `D` in 1..=3, full or reduced ranks.
pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let d = 1 + (seed % 3) as usize;
    let reduced = (seed / 3) % 2 == 1;
    let n = r.random_range(2..=8);
    let extents: Vec<usize> = loop {
        let e: Vec<usize> = (0..d)
            .map(|_| match d {
                1 => r.random_range(2..=12),
                2 => r.random_range(2..=6),
                _ => r.random_range(2..=4),
            })
            .collect();
        if e.iter().product::<usize>() <= 48 {
            break e;
        }
    };
    let (p, q): (Vec<usize>, Vec<usize>) = extents
        .iter()
        .map(|&t| {
            if reduced {
                (r.random_range(1..t), r.random_range(1..t))
            } else {
                (t, t)
            }
        })
        .unzip();
    instance(n, &extents, &p, &q, r.random_range(1..=4), &mut r)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

pub fn max_abs_diff(a: &DenseTensor, b: &DenseTensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
