//! Seeded random streams.
//!
//! Every random quantity in a run is drawn from a stream identified by
//! `(seed, tag, index)`, so work can be split across workers or resumed
//! without depending on how much randomness earlier steps consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag)));
    rng.set_stream(splitmix64(index.wrapping_add(tag.rotate_left(32))));
    rng
}

/// A seed for a nested component, derived from `(seed, tag, index)`.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags used across the crate.
pub mod tags {
    pub const TRAIN: u64 = 1;
    pub const PLAN: u64 = 2;
    pub const MEASURE: u64 = 3;
    pub const BASELINE: u64 = 4;
    pub const METRICS: u64 = 5;
    pub const VALIDATION: u64 = 6;
    pub const DRAW: u64 = 7;
    pub const CANDIDATE: u64 = 8;
    pub const OBS_NOISE: u64 = 9;
    pub const REFINE: u64 = 10;
}
