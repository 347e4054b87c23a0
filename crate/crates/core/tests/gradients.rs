mod common;

use common::checks::{full_loss_gradcheck, gradient_cases};
use common::gradcheck;

#[test]
fn every_operation_matches_central_differences() {
    let mut failures = Vec::new();
    for c in gradient_cases(11) {
        let err = gradcheck(&c.inputs, &c.f);
        if err >= 1e-4 {
            failures.push(format!("{}: {err:e}", c.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn full_episode_loss_matches_central_differences() {
    let (err, n) = full_loss_gradcheck(5);
    assert!(n > 100, "only {n} parameters checked");
    assert!(err < 1e-4, "max relative error {err:e} over {n} parameters");
}
