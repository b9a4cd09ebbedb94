mod common;

use common::{gradcheck, model_gradcheck, op_cases};

#[test]
fn every_op_matches_finite_differences() {
    for k in 0..5 {
        for case in op_cases(k) {
            let err = gradcheck(&case.inputs, &case.build, 40, k);
            assert!(err < 1e-3, "{} instance {k}: relative error {err:.2e}", case.op);
        }
    }
}

#[test]
fn end_to_end_model_gradients() {
    let (worst, informative) = model_gradcheck(20, 5);
    assert!(worst < 1e-2, "relative error {worst:.2e}");
    assert!(informative >= 10, "only {informative} of 20 coordinates carry gradient");
}
