//! Seed plumbing. Every random draw in the crate comes from a ChaCha8
//! stream keyed by a `u64` seed, so results are identical across
//! platforms and runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; used to derive independent sub-seeds.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, salt))
}

/// Salts naming the independent streams of a run.
pub mod salt {
    pub const PROTOTYPES: u64 = 1;
    pub const SAMPLES: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const FEW_SHOT: u64 = 4;
    pub const SHIFT: u64 = 5;
    pub const IMAGE_ENCODER: u64 = 10;
    pub const TEXT_ENCODER: u64 = 11;
    pub const CLASS_EMBEDDING: u64 = 12;
    pub const TEMPLATE: u64 = 13;
    pub const METANET_INIT: u64 = 21;
    pub const BATCHES: u64 = 30;
    pub const PROFILE: u64 = 31;
    pub const WRS_PROFILE: u64 = 32;
}
