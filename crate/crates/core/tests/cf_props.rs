//! Propagation against a dense normalized-adjacency oracle, plus CF
//! pretraining properties.

mod common;

use bundlekit::cf::{aggregate_layers, pretrain, propagate, CfConfig, CfEmbeddings};
use bundlekit::numerics::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracles::{max_oracle_gap, random_graph};

#[test]
fn matches_dense_oracle_on_fifty_graphs() {
    for seed in 0..50 {
        let gap = max_oracle_gap(seed);
        assert!(gap < 1e-10, "graph {seed}: gap {gap}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dense_oracle_property(seed in any::<u64>()) {
        prop_assert!(max_oracle_gap(seed) < 1e-10);
    }

    #[test]
    fn propagation_is_linear(seed in any::<u64>(), alpha in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 10);
        let u = Matrix::from_fn(g.n_users, 3, |_, _| rng.random_range(-1.0..1.0));
        let i = Matrix::from_fn(g.n_items, 3, |_, _| rng.random_range(-1.0..1.0));
        let base = propagate(&u, &i, &g, 2);
        let scaled = propagate(&u.scale(alpha), &i.scale(alpha), &g, 2);
        for ((bu, bi), (su, si)) in base.iter().zip(&scaled) {
            prop_assert!(bu.scale(alpha).max_abs_diff(su) < 1e-10);
            prop_assert!(bi.scale(alpha).max_abs_diff(si) < 1e-10);
        }
    }

    #[test]
    fn coefficients_are_symmetric(seed in any::<u64>()) {
        // Propagating a one-hot item to a user and a one-hot user to an item
        // must use the same weight for the same edge.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 8);
        for &(u, i) in &g.edges {
            let mut items = Matrix::zeros(g.n_items, 1);
            items.set(i, 0, 1.0);
            let (to_user, _) = &propagate(&Matrix::zeros(g.n_users, 1), &items, &g, 1)[1];
            let mut users = Matrix::zeros(g.n_users, 1);
            users.set(u, 0, 1.0);
            let (_, to_item) = &propagate(&users, &Matrix::zeros(g.n_items, 1), &g, 1)[1];
            prop_assert_eq!(to_user.get(u, 0), to_item.get(i, 0));
        }
    }
}

#[test]
fn aggregation_matches_direct_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layers: Vec<(Matrix<f64>, Matrix<f64>)> = (0..3)
        .map(|_| {
            (
                Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)),
                Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0)),
            )
        })
        .collect();
    let (u, i) = aggregate_layers(&layers);
    for r in 0..4 {
        for c in 0..3 {
            let mean = layers.iter().map(|l| l.0.get(r, c)).sum::<f64>() / 3.0;
            assert!((u.get(r, c) - mean).abs() < 1e-12);
        }
    }
    for r in 0..5 {
        for c in 0..3 {
            let mean = layers.iter().map(|l| l.1.get(r, c)).sum::<f64>() / 3.0;
            assert!((i.get(r, c) - mean).abs() < 1e-12);
        }
    }
    let same = vec![layers[0].clone(); 3];
    let (u, _) = aggregate_layers(&same);
    assert!(u.max_abs_diff(&layers[0].0) < 1e-15);
}

#[test]
fn pretraining_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = random_graph(&mut rng, 10);
    let config = CfConfig {
        dim: 4,
        epochs: 5,
        batch_size: 7,
        ..Default::default()
    };
    let run = || pretrain(&g, &config, &mut ChaCha8Rng::seed_from_u64(21));
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_to(&mut x).unwrap();
    b.write_to(&mut y).unwrap();
    assert_eq!(x, y);
    assert_eq!(CfEmbeddings::read_from(&x[..]).unwrap(), a);
}
