//! Seed derivation. Every random draw in the crate comes from a ChaCha stream keyed by
//! `(base seed, stream tag, index)`, so any item can be regenerated in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

pub fn rng_for(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

/// Stream tags. Distinct tags keep unrelated consumers from sharing random sequences.
pub mod stream {
    pub const SCENE: u64 = 0x5343;
    pub const SHIFT: u64 = 0x5348;
    pub const SPLIT: u64 = 0x5350;
    pub const INIT: u64 = 0x494e;
    pub const BATCH: u64 = 0x4241;
    pub const WEAK: u64 = 0x5745;
    pub const STRONG: u64 = 0x5354;
    pub const PRETRAIN: u64 = 0x5054;
    pub const ADAPT: u64 = 0x4144;
    pub const ORACLE: u64 = 0x4f52;
}
