//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer over `seed ^ stream`; distinct streams give
/// statistically unrelated seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

/// Named stream ids so call sites cannot collide by accident.
pub mod streams {
    pub const OPPORTUNITIES: u64 = 1;
    pub const CLICKS: u64 = 2;
    pub const BEHAVIOR: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const EXPLORATION: u64 = 5;
    pub const EVALUATION: u64 = 6;
    pub const MODEL_INIT: u64 = 7;
}
