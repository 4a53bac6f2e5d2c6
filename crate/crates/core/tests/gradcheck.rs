mod common;

use common::{grpo_grad_error, training_loss_grad_errors, GRAD_TOL};

#[test]
fn full_training_loss_matches_central_differences() {
    for (case, err) in training_loss_grad_errors() {
        assert!(err < GRAD_TOL, "{case}: {err}");
    }
}

#[test]
fn grpo_surrogate_matches_central_differences() {
    let err = grpo_grad_error();
    assert!(err < GRAD_TOL, "{err}");
}
