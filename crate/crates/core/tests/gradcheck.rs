//! Analytic gradients versus central finite differences for every
//! differentiable operation, at both dtypes. Composed-network gradient
//! checks live in the acceptance suite alongside the network builders.

mod common;

use common::gradcheck::run_op_suite;

#[test]
fn all_ops_match_finite_differences_f64() {
    for (name, err) in run_op_suite::<f64>(50) {
        assert!(err < 1e-5, "{name}: fp64 max relative error {err:.3e} >= 1e-5");
    }
}

#[test]
fn all_ops_match_finite_differences_f32() {
    for (name, err) in run_op_suite::<f32>(50) {
        assert!(err < 1e-3, "{name}: fp32 max relative error {err:.3e} >= 1e-3");
    }
}
