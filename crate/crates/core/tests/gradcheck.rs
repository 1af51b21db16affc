mod common;

use common::{end_to_end_gradient_check, op_gradient_checks, GRADCHECK_COORDS, GRADCHECK_POOLINGS, GRAD_TOL};

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in op_gradient_checks() {
        assert!(err < GRAD_TOL, "{name}: max relative error {err:e}");
    }
}

#[test]
fn tiny_network_matches_finite_differences_for_each_pooling() {
    for pooling in GRADCHECK_POOLINGS {
        let err = end_to_end_gradient_check(pooling, GRADCHECK_COORDS);
        assert!(err < GRAD_TOL, "{}: max relative error {err:e}", pooling.name());
    }
}
