use std::collections::HashSet;

use mplnet::eval::{edge_scores, jaccard_stability, pauprc_ratio, EdgeScoreList, StabilityFit};
use mplnet::pln::CountDataset;
use mplnet::simgen::{self, ari, DropoutLevel, GraphKind, SimConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph_kind() -> impl Strategy<Value = GraphKind> {
    prop_oneof![
        Just(GraphKind::Random),
        Just(GraphKind::Hub),
        Just(GraphKind::Blocked),
        Just(GraphKind::ScaleFree)
    ]
}

fn small_config(seed: u64, kind: GraphKind, dropout: DropoutLevel) -> SimConfig {
    SimConfig {
        n: 200,
        p: 15,
        graph_kind: kind,
        dropout_level: dropout,
        seed,
        p_d: Some(5),
        ..SimConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_precisions_are_pd_with_common_diagonal(seed in 0u64..10_000, p in 5usize..40, kind in graph_kind()) {
        let theta = simgen::gen_graph(kind, p, seed).unwrap();
        prop_assert!(theta.clone().cholesky().is_some());
        let d = theta[(0, 0)];
        prop_assert!(d > 1.0);
        prop_assert!((0..p).all(|j| theta[(j, j)] == d));
        let eig = theta.symmetric_eigenvalues().min();
        prop_assert!(eig >= 0.1 - 1e-9);
    }

    #[test]
    fn edge_scores_ignore_diagonal_rescaling(seed in 0u64..10_000, p in 2usize..12) {
        let theta = simgen::gen_graph(GraphKind::Random, p, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<f64> = (0..p).map(|_| rng.random_range(0.1..10.0)).collect();
        let scaled = DMatrix::from_fn(p, p, |i, j| d[i] * theta[(i, j)] * d[j]);
        let a = edge_scores(&theta).unwrap();
        let b = edge_scores(&scaled).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            prop_assert!((x.2 - y.2).abs() <= 1e-12 * x.2.max(1.0));
        }
    }

    #[test]
    fn pauprc_ratio_is_a_rank_statistic(seed in 0u64..10_000, p in 4usize..15, power in 0.2f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth = HashSet::new();
        let mut entries = Vec::new();
        for l in 0..p {
            for m in l + 1..p {
                if rng.random::<f64>() < 0.3 {
                    truth.insert((l, m));
                }
                let s = if rng.random::<f64>() < 0.3 { 0.0 } else { (rng.random_range(1..50) as f64) / 50.0 };
                entries.push((l, m, s));
            }
        }
        prop_assume!(!truth.is_empty() && entries.iter().any(|e| e.2 > 0.0));
        let scores = EdgeScoreList { p, entries };
        let mut transformed = scores.clone();
        for e in transformed.entries.iter_mut() {
            if e.2 > 0.0 {
                e.2 = e.2.powf(power) + 3.0;
            }
        }
        let a = pauprc_ratio(&scores, &truth).unwrap();
        let b = pauprc_ratio(&transformed, &truth).unwrap();
        prop_assert!((a.ratio - b.ratio).abs() <= 1e-12 * a.ratio.max(1.0));
        prop_assert!(a.ratio >= 0.0);
    }

    #[test]
    fn ari_is_symmetric_and_label_free(seed in 0u64..10_000, n in 2usize..60, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let relabeled: Vec<usize> = a.iter().map(|&x| (x + 1) % k).collect();
        let ab = ari(&a, &b).unwrap();
        prop_assert!((ab - ari(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ari(&a, &relabeled).unwrap() - 1.0).abs() < 1e-12 || a.iter().all(|&x| x == a[0]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn jaccard_stability_lies_in_the_unit_interval(seed in 0u64..1000, density in 0.05f64..0.9) {
        let data = CountDataset::new(
            DMatrix::from_fn(20, 8, |i, j| ((i * 3 + j) % 7) as f64),
            vec![1.0; 20],
            (0..8).map(|j| format!("f{j}")).collect(),
        ).unwrap();
        let procedure = |d: &CountDataset, s: u64| {
            let theta = simgen::gen_graph(GraphKind::Random, 8, s).unwrap();
            Ok(StabilityFit { precisions: vec![theta], responsibilities: DMatrix::from_element(d.n(), 1, 1.0) })
        };
        let s = jaccard_stability(&data, procedure, 0.8, 4, density, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }
}

#[test]
fn identical_seeds_give_identical_datasets() {
    for kind in [GraphKind::Random, GraphKind::Hub, GraphKind::Blocked, GraphKind::ScaleFree] {
        let cfg = small_config(11, kind, DropoutLevel::Low);
        let a = simgen::gen_dataset(&cfg).unwrap();
        let b = simgen::gen_dataset(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.true_precisions, b.true_precisions);
    }
    let a = simgen::gen_dataset(&small_config(11, GraphKind::Random, DropoutLevel::Low)).unwrap();
    let b = simgen::gen_dataset(&small_config(11, GraphKind::Hub, DropoutLevel::Low)).unwrap();
    assert_ne!(a.true_precisions, b.true_precisions);
}

#[test]
fn high_dropout_has_more_zeros_on_average() {
    let mut low = 0.0;
    let mut high = 0.0;
    for seed in 0..10 {
        low += simgen::gen_dataset(&small_config(seed, GraphKind::Random, DropoutLevel::Low)).unwrap().zero_fraction();
        high += simgen::gen_dataset(&small_config(seed, GraphKind::Random, DropoutLevel::High)).unwrap().zero_fraction();
    }
    assert!(high > low, "high {high} vs low {low}");
}

#[test]
fn no_discriminative_coordinates_means_one_mean() {
    let cfg = SimConfig { p_d: Some(0), ..small_config(4, GraphKind::Random, DropoutLevel::Low) };
    let ds = simgen::gen_dataset(&cfg).unwrap();
    assert!(ds.true_means.iter().all(|m| m == &ds.true_means[0]));
}
