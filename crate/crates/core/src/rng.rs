//! Seed derivation. Every random draw in an experiment comes from a ChaCha
//! stream whose seed is derived from the master seed and a fixed purpose path,
//! so any stage can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream labels, so derived seeds for different purposes never collide.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const MEMORY: u64 = 3;
    pub const CONTRASTIVE: u64 = 4;
    pub const FINETUNE: u64 = 5;
    pub const CALIBRATION: u64 = 6;
    pub const SYNTHETIC: u64 = 7;
    pub const EMBEDDING: u64 = 8;
    pub const SHUFFLE: u64 = 9;
    pub const AUGMENT: u64 = 10;
}
