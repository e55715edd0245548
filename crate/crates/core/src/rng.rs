//! Seed handling. Every random draw in the crate flows from an explicit `u64`
//! seed through ChaCha8, so outputs never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent sub-streams of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Landmarks = 1,
    Premask = 2,
    Signs = 3,
    Subset = 4,
    Rademacher = 5,
    ToyData = 6,
    ToyInit = 7,
    JvpDirections = 8,
    Trials = 9,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Per-trial seed: `splitmix64(seed ^ splitmix64(trial + 1))`. Trials can run
/// in any order or in parallel and still draw the same numbers.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    splitmix64(seed ^ splitmix64(trial.wrapping_add(1)))
}

pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    stream(trial_seed(seed, trial), Stream::Trials)
}
