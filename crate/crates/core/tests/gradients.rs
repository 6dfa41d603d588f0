mod common;

use common::{full_loss_grad_err, loss_identity_gap, op_cases, RECURRENT_TOL};

#[test]
fn every_op_matches_central_differences() {
    for case in op_cases() {
        for s in 0..20 {
            let err = (case.run)(s);
            assert!(err < case.tol, "{} seed {s}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn full_loss_gradient_matches_central_differences() {
    for s in 0..20 {
        let err = full_loss_grad_err(s);
        assert!(err < RECURRENT_TOL, "seed {s}: relative error {err:e}");
    }
}

#[test]
fn batched_loss_equals_stepwise_log_q() {
    for s in 0..50 {
        let gap = loss_identity_gap(s);
        assert!(gap < 1e-9, "seed {s}: gap {gap:e}");
    }
}
