//! Fixtures shared by the criterion benchmarks in `benches/`.

use zoomlr::teacher_student::{generate, Activation, NetConfig, Problem};
use zoomlr::{ActiveArm, ZoomingState};

/// A zooming state with `arms` evenly spaced arms, each played `plays` times.
pub fn crowded_state(arms: usize, plays: u64) -> ZoomingState {
    let arms = (0..arms).map(|i| {
        let c = (i as f64 + 0.5) / arms as f64;
        ActiveArm::with_stats(c, plays, 0.5 * plays as f64)
    });
    ZoomingState::with_arms(0.1, 0, arms).expect("valid radius scale")
}

pub fn problem(d: usize, k: usize, n: usize, activation: Activation) -> Problem {
    generate(&NetConfig::new(d, k, activation, n), 7)
}

/// Deterministic reward landscape peaked at 0.7.
pub fn tent(coord: f64) -> f64 {
    1.0 - (coord - 0.7).abs()
}
