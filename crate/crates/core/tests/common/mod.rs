#![allow(dead_code)]

use mplnet::pln::{CountDataset, MixtureParams};
use mplnet::variational::VariationalState;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("f{j}")).collect()
}

/// `AᵀA + shift·I` with entries of A uniform on (−0.5, 0.5).
pub fn random_spd(rng: &mut impl Rng, p: usize, shift: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-0.5..0.5));
    a.tr_mul(&a) + DMatrix::identity(p, p) * shift
}

/// Counts, parameters and a valid variational state with no structure.
pub fn random_instance(seed: u64, n: usize, p: usize, big_g: usize) -> (CountDataset, MixtureParams, VariationalState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = DMatrix::from_fn(n, p, |_, _| rng.random_range(0..8) as f64);
    let scaling = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let data = CountDataset::new(counts, scaling, names(p)).unwrap();
    let mut props: Vec<f64> = (0..big_g).map(|_| rng.random_range(0.2..1.0)).collect();
    let t: f64 = props.iter().sum();
    props.iter_mut().for_each(|v| *v /= t);
    let means = (0..big_g).map(|_| DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.5))).collect();
    let precisions = (0..big_g).map(|_| random_spd(&mut rng, p, 0.5)).collect();
    let params = MixtureParams::new(props, means, precisions).unwrap();
    let mut resp = DMatrix::from_fn(n, big_g, |_, _| rng.random_range(0.05..1.0));
    for i in 0..n {
        let s: f64 = resp.row(i).sum();
        for g in 0..big_g {
            resp[(i, g)] /= s;
        }
    }
    let state = VariationalState {
        var_means: (0..big_g).map(|_| DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..2.0))).collect(),
        var_variances: (0..big_g).map(|_| DMatrix::from_fn(n, p, |_, _| rng.random_range(0.1..1.5))).collect(),
        responsibilities: resp,
    };
    (data, params, state)
}

/// Sample covariance of `n` standard normal draws in `p` dimensions.
pub fn sample_cov(seed: u64, p: usize, n: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, _| {
        let u: f64 = rng.random_range(1e-12..1.0);
        let v: f64 = rng.random();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    });
    let mean = DVector::from_fn(p, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - mean[j]);
    centered.tr_mul(&centered) / n as f64
}
