//! Seeded random streams.
//!
//! Every random decision in the system draws from a `ChaCha8Rng` whose seed is
//! derived from the run seed plus a label and indices. ChaCha output is fixed
//! by its reference algorithm, so streams are identical across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels. Distinct labels give independent streams for the same indices.
pub mod stream {
    pub const DATASET: u64 = 1;
    pub const TRAINER_SHARD: u64 = 2;
    pub const VALIDATOR_SHARD: u64 = 3;
    pub const SGD: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const NETWORK: u64 = 6;
    pub const BEHAVIOR: u64 = 7;
    pub const INIT: u64 = 8;
    pub const SPLIT: u64 = 9;
    pub const BYZANTINE: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with every element of `parts` through SplitMix64.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A generator for the stream identified by `(base, parts)`.
pub fn stream_rng(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
