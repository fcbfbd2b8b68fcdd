//! Seed schedule shared by every study.
//!
//! Run `i` of a study uses `base_seed + i`. Inside one run the tuner, the
//! objective and per-evaluation weight initialisation each draw from their own
//! ChaCha stream, so two algorithms run with the same seed face the same
//! objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream used by tuners for their own randomness.
pub const TUNER_STREAM: u64 = 0;
/// Stream used to build objectives (datasets, teacher weights, noise).
pub const OBJECTIVE_STREAM: u64 = 1;
/// Stream used for per-evaluation student initialisation.
pub const INIT_STREAM: u64 = 2;

pub fn run_seed(base_seed: u64, run: usize) -> u64 {
    base_seed.wrapping_add(run as u64)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
