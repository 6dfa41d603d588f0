//! Seed splitting.
//!
//! Every random stream in the crate is derived from one `u64` command seed by
//! hashing it together with a path of tags (purpose, worker/record index, ...)
//! through SplitMix64. Streams for different paths are independent for all
//! practical purposes, so work can be split across workers or records without
//! changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod tag {
    pub const INIT: u64 = 1;
    pub const TRAIN_BATCH: u64 = 2;
    pub const HELDOUT: u64 = 3;
    pub const GENERATE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PARTICLE: u64 = 6;
    pub const PERTURB: u64 = 7;
    pub const GAUSS: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a tag path.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn rng(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, path))
}
