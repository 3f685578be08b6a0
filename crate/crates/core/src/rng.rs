//! Deterministic seed derivation.
//!
//! Every random decision in the lab flows from a master seed through
//! [`seed_hash`], so candidate sampling, dataset generation, and shuffling
//! are reproducible regardless of thread count or call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a sequence of labels into a single 64-bit seed (SplitMix64 chain).
pub fn seed_hash(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e3779b97f4a7c15;
    for &p in parts {
        h ^= p;
        h = splitmix64(h);
    }
    h
}

/// Fresh deterministic RNG for the given seed parts.
pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed_hash(parts))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stable tags for deriving sub-seeds from a master seed.
pub mod tag {
    pub const PRETRAIN_DATA: u64 = 0x01;
    pub const DSR_PROMPTS: u64 = 0x02;
    pub const DSR_IMAGES: u64 = 0x03;
    pub const EVAL_PROMPTS: u64 = 0x04;
    pub const EVAL_SCENES: u64 = 0x05;
    pub const INIT: u64 = 0x10;
    pub const SHUFFLE: u64 = 0x11;
    pub const SAMPLE: u64 = 0x12;
    pub const EVAL: u64 = 0x13;
    pub const CORRUPT: u64 = 0x14;
}
