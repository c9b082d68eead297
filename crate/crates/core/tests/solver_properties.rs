mod common;

use common::{random_instance, random_spd, sample_cov};
use mplnet::admm::{self, AdmmSettings, AdmmWorkspace, RowStatus};
use mplnet::glasso::{self, GlassoOptions, ZeroEdgeSet};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tridiagonal precision with the given off-diagonal magnitude, inverted.
fn chain_cov(p: usize, rho: f64) -> DMatrix<f64> {
    let mut theta = DMatrix::identity(p, p);
    for j in 0..p - 1 {
        theta[(j, j + 1)] = -rho;
        theta[(j + 1, j)] = -rho;
    }
    theta.try_inverse().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn newton_solves_the_coordinate_equation(
        y in 0u32..500,
        l in 0.05f64..20.0,
        s in 0.01f64..3.0,
        n_target in -3.0f64..6.0,
        alpha in -2.0f64..2.0,
        rho in 0.1f64..10.0,
    ) {
        let m = admm::newton_1d_m(y as f64, l, s, n_target, alpha, rho).unwrap();
        let grad = -(y as f64) + (m + s / 2.0 + l.ln()).exp() + alpha + rho * (m - n_target);
        prop_assert!(grad.abs() <= 1e-10 * (1.0 + y as f64), "gradient {grad:e} at m = {m}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn converged_rows_meet_the_primal_tolerance(seed in 0u64..1000, p in 1usize..6) {
        let (data, params, state) = random_instance(seed, 4, p, 1);
        let mu: Vec<f64> = params.means[0].iter().copied().collect();
        let ws = AdmmWorkspace::new(&params.precisions[0], &mu, AdmmSettings::default()).unwrap();
        for i in 0..data.n() {
            let r = admm::m_row_update(i, 0, &data, &state, &ws).unwrap();
            if r.status == RowStatus::Converged {
                let norm = r.row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(r.primal_residual <= 1e-6 * (1.0 + norm));
            }
        }
    }

    #[test]
    fn one_factorization_per_component(seed in 0u64..1000, n in 1usize..30, big_g in 1usize..4) {
        let (data, params, state) = random_instance(seed, n, 3, big_g);
        let (_, report) = admm::m_step(&data, &params, &state, AdmmSettings::default()).unwrap();
        prop_assert_eq!(report.factorizations, big_g);
        prop_assert_eq!(report.rows, n * big_g);
    }

    #[test]
    fn row_update_depends_only_on_its_row(seed in 0u64..1000) {
        let (data, params, state) = random_instance(seed, 6, 3, 2);
        let (data2, _, state2) = random_instance(seed + 7777, 6, 3, 2);
        // splice row 2 of the first instance into the second
        let mut counts = data2.counts().clone();
        let mut scaling = data2.scaling().to_vec();
        let mut s2 = state2.clone();
        for j in 0..3 {
            counts[(2, j)] = data.counts()[(2, j)];
            for g in 0..2 {
                s2.var_means[g][(2, j)] = state.var_means[g][(2, j)];
                s2.var_variances[g][(2, j)] = state.var_variances[g][(2, j)];
            }
        }
        scaling[2] = data.scaling()[2];
        let spliced = mplnet::pln::CountDataset::new(counts, scaling, common::names(3)).unwrap();
        for g in 0..2 {
            let mu: Vec<f64> = params.means[g].iter().copied().collect();
            let ws = AdmmWorkspace::new(&params.precisions[g], &mu, AdmmSettings::default()).unwrap();
            let a = admm::m_row_update(2, g, &data, &state, &ws).unwrap();
            let b = admm::m_row_update(2, g, &spliced, &s2, &ws).unwrap();
            prop_assert_eq!(a.row, b.row);
        }
    }

    #[test]
    fn glasso_output_is_symmetric_pd_and_pinned(seed in 0u64..1000, p in 2usize..9, log_lambda in -4.0f64..0.0) {
        let cov = sample_cov(seed, p, 3 * p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut zeros = ZeroEdgeSet::new();
        for _ in 0..p / 2 {
            let a = rng.random_range(0..p);
            let b = (a + 1 + rng.random_range(0..p - 1)) % p;
            zeros.insert(a, b, p).unwrap();
        }
        let lambda = 10f64.powf(log_lambda);
        let sol = glasso::glasso_fit(&cov, lambda, &zeros, 1e-6).unwrap();
        let t = &sol.precision;
        prop_assert!((t - t.transpose()).amax() <= 1e-12);
        prop_assert!(t.clone().cholesky().is_some());
        for (a, b) in zeros.iter() {
            prop_assert_eq!(t[(a, b)].to_bits(), 0.0f64.to_bits());
            prop_assert_eq!(t[(b, a)].to_bits(), 0.0f64.to_bits());
        }
        prop_assert!(glasso::kkt_residual(t, &cov, lambda, &zeros).unwrap() <= 1e-6);
    }

    #[test]
    fn glasso_never_worse_than_its_warm_start(seed in 0u64..1000, p in 2usize..8, log_lambda in -3.0f64..-0.5) {
        let cov = sample_cov(seed, p, 4 * p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let warm = random_spd(&mut rng, p, 0.3);
        let lambda = 10f64.powf(log_lambda);
        let options = GlassoOptions { tol: 1e-6, max_sweeps: 500 };
        let sol = glasso::glasso_fit_warm(&cov, lambda, &ZeroEdgeSet::new(), options, Some(&warm)).unwrap();
        let start = glasso::glasso_objective(&warm, &cov, lambda).unwrap();
        prop_assert!(glasso::glasso_objective(&sol.precision, &cov, lambda).unwrap() <= start + 1e-9);
    }

    #[test]
    fn chain_support_shrinks_along_the_path(p in 3usize..10, rho in 0.1f64..0.45) {
        let cov = chain_cov(p, rho);
        let mut last = usize::MAX;
        for k in 0..15 {
            let lambda = 1e-3 * 10f64.powf(3.0 * k as f64 / 14.0);
            let sol = glasso::glasso_fit(&cov, lambda, &ZeroEdgeSet::new(), 1e-8).unwrap();
            let edges = glasso::count_edges(&sol.precision);
            prop_assert!(edges <= last, "edges grew from {last} to {edges} at λ = {lambda}");
            last = edges;
        }
    }

    #[test]
    fn two_feature_paths_are_monotone(seed in 0u64..1000, n in 3usize..30) {
        let cov = sample_cov(seed, 2, n);
        let mut last = usize::MAX;
        for k in 0..20 {
            let lambda = 1e-3 * 10f64.powf(3.0 * k as f64 / 19.0);
            let sol = glasso::glasso_fit(&cov, lambda, &ZeroEdgeSet::new(), 1e-8).unwrap();
            let edges = glasso::count_edges(&sol.precision);
            prop_assert!(edges <= last);
            last = edges;
        }
    }
}

/// Three features already allow an edge to leave and return along the
/// path while every point is optimal: Θ₀₂ changes sign between λ ≈ 0.026
/// and λ ≈ 0.16.
#[test]
fn three_feature_support_can_regrow() {
    let cov = sample_cov(478, 3, 10);
    let zeros = ZeroEdgeSet::new();
    let counts: Vec<usize> = [0.02637, 0.07848, 0.16238]
        .iter()
        .map(|&lambda| {
            let sol = glasso::glasso_fit(&cov, lambda, &zeros, 1e-10).unwrap();
            assert!(glasso::kkt_residual(&sol.precision, &cov, lambda, &zeros).unwrap() < 1e-10);
            glasso::count_edges(&sol.precision)
        })
        .collect();
    assert_eq!(counts, vec![3, 2, 3]);
}
