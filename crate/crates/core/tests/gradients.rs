mod common;

use qrsim_core::neuralnet::{adam_step, AdamState, Direction};
use qrsim_core::policies::bernoulli_log_prob;

#[test]
fn backprop_matches_central_differences() {
    let worst = common::gradient_check(25, 1);
    assert!(worst < 1e-5, "max relative error {worst:e}");
}

#[test]
fn adam_first_step_by_hand() {
    // m1 = 0.1 g, v1 = 0.001 g^2; bias correction gives m = g, v = g^2, so
    // the step is lr * g / (|g| + eps).
    let g = [0.3, -4.0];
    let mut p = [0.0, 0.0];
    let mut s = AdamState::new(2, 1e-8);
    adam_step(&mut p, &g, &mut s, 1e-3, Direction::Ascent).unwrap();
    assert!((p[0] - 1e-3 * 0.3 / (0.3 + 1e-8)).abs() < 1e-15);
    assert!((p[1] + 1e-3 * 4.0 / (4.0 + 1e-8)).abs() < 1e-15);
    assert_eq!(s.step, 1);
}

#[test]
fn bernoulli_log_probs_normalise() {
    let probs = [0.01, 0.2, 0.5, 0.7, 0.93, 0.999, 0.4, 0.05, 0.61];
    let total: f64 = (0u32..512)
        .map(|mask| {
            let bits: Vec<bool> = (0..9).map(|k| mask >> k & 1 == 1).collect();
            bernoulli_log_prob(&probs, &bits).exp()
        })
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
}
