//! Seed plumbing. Every stochastic step draws from its own ChaCha stream derived
//! from a base seed and a short tag list, so reordering unrelated steps never
//! shifts another step's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

pub fn derived(base: u64, tags: &[u64]) -> Rng {
    seeded(derive(base, tags))
}

pub(crate) mod tag {
    pub const PROXY: u64 = 1;
    pub const FULL: u64 = 2;
    pub const SELECT: u64 = 3;
    pub const HEAD: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const PRETRAIN: u64 = 6;
    pub const INIT: u64 = 7;
}
