//! Sub-seed derivation.
//!
//! Every random component draws from its own stream, derived from the single
//! user seed with a splitmix64 finalizer over `seed ^ tag`. Adding a new
//! consumer never perturbs existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Values are arbitrary but frozen: changing one changes every
/// output that depends on it.
pub mod stream {
    pub const INIT: u64 = 0x494e_4954;
    pub const BATCHES: u64 = 0x4241_5443;
    pub const SUBSAMPLE: u64 = 0x5355_4253;
    pub const GRAPH: u64 = 0x4752_4150;
    pub const NOISE: u64 = 0x4e4f_4953;
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

pub fn rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}
