mod common;

use gosl_core::neural::{gcn_forward_with_masks, softmax_rows, GcnParams};
use ndarray::Array2;
use proptest::prelude::*;

#[test]
fn analytic_gradients_match_finite_differences() {
    let report = common::gradient_suite(20, 11);
    assert_eq!(report.instances, 20);
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {}",
        report.max_rel_error
    );
}

#[test]
fn gradients_hold_on_another_draw() {
    let report = common::gradient_suite(20, 12345);
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {}",
        report.max_rel_error
    );
}

#[test]
fn eval_forward_matches_dense_formula() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let graph = common::random_graph(&mut rng, 12, 0.3, 5);
    let adj = gosl_core::graph::normalize_adjacency(&graph).unwrap();
    let params = GcnParams::glorot(5, 4, 3, &mut rng);
    let cache = gcn_forward_with_masks(&adj, graph.sparse_features(), &params, None).unwrap();
    let a = common::dense_normalized(&graph);
    let h = a.dot(graph.features()).dot(&params.w0).mapv(|v: f64| v.max(0.0));
    let z = a.dot(&h).dot(&params.w1);
    let p = softmax_rows(&z);
    assert!((&cache.probs - &p).iter().all(|d| d.abs() < 1e-12));
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(values in prop::collection::vec(-30.0f64..30.0, 12), shift in -500.0f64..500.0) {
        let z = Array2::from_shape_vec((3, 4), values).unwrap();
        let a = softmax_rows(&z);
        let b = softmax_rows(&z.mapv(|v| v + shift));
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for row in a.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trips(values in prop::collection::vec(prop::num::f64::NORMAL, 3 * 2 + 2 * 4)) {
        let params = GcnParams {
            w0: Array2::from_shape_vec((3, 2), values[..6].to_vec()).unwrap(),
            w1: Array2::from_shape_vec((2, 4), values[6..].to_vec()).unwrap(),
        };
        let mut buf = Vec::new();
        params.write_text(&mut buf).unwrap();
        let back = GcnParams::read_text(buf.as_slice()).unwrap();
        prop_assert_eq!(back, params);
    }
}
