//! Shared fixtures for unit tests.

use crate::model::PiecewiseModel;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reference plant used throughout the tests: slow long-delay mode 1,
/// fast unit-delay mode 2.
pub fn pilot_model() -> PiecewiseModel {
    PiecewiseModel::new(0.9962, 0.9942, 0.0046, 0.0084, 0.0189, 0.0245, 50, 1, 1.0).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform sample in [-1, 1).
pub fn uniform(r: &mut ChaCha8Rng) -> f64 {
    r.random_range(-1.0..1.0)
}

/// Random strictly stable two-mode model with zero offsets.
pub fn random_stable_model(r: &mut ChaCha8Rng, d2_max: usize) -> PiecewiseModel {
    let d2 = r.random_range(1..=d2_max);
    let d1 = d2 + r.random_range(0..=6);
    PiecewiseModel::new(
        r.random_range(-0.95..0.95),
        r.random_range(-0.95..0.95),
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
        0.0,
        0.0,
        d1,
        d2,
        1.0,
    )
    .unwrap()
}

/// Deterministic step-test input: a staircase whose ascents and descents
/// both contain sub-steps, so each mode's dwell has internal input
/// variation. That variation is what makes the integer-delay search
/// identifiable sample by sample.
pub fn rich_step_input() -> Vec<f64> {
    let program: &[(f64, usize)] = &[
        (0.50, 120),
        // ascent in three sub-steps
        (0.80, 25),
        (1.10, 25),
        (1.40, 260),
        // descent in two sub-steps
        (1.20, 30),
        (1.00, 330),
        // single large ascent
        (1.60, 240),
        // descent in three sub-steps
        (1.35, 30),
        (1.10, 35),
        (0.85, 360),
        // ascent in two sub-steps
        (1.15, 20),
        (1.45, 260),
        // final long descent
        (0.70, 380),
    ];
    program
        .iter()
        .flat_map(|&(level, dwell)| std::iter::repeat(level).take(dwell))
        .collect()
}
