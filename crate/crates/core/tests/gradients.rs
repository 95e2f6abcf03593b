//! Finite-difference checks of every differentiable op and of the composed
//! training objective.

#[path = "common/grad.rs"]
mod grad;

use grad::TOL;

#[test]
fn every_op_matches_central_differences() {
    for (name, worst) in grad::op_suite(100, 1) {
        assert!(worst < TOL, "{name}: relative error {worst:e}");
    }
}

#[test]
fn total_loss_directional_derivative() {
    let err = grad::total_loss_directional(5);
    assert!(err < TOL, "relative error {err:e}");
}

#[test]
fn total_loss_gradient_wrt_onehot() {
    let err = grad::total_loss_wrt_onehot();
    assert!(err < TOL, "relative error {err:e}");
}

#[test]
fn straight_through_gradient_equals_hard_onehot_gradient() {
    for seed in [4, 5, 6] {
        let c = grad::straight_through_equivalence(seed);
        assert!(c.forward_equal && c.argmax_ok, "seed {seed}");
        assert_eq!(c.max_diff, 0.0, "seed {seed}");
        assert!(c.nonzero, "seed {seed}");
    }
}
