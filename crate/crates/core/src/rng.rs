//! Seed derivation for reproducible, splittable random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator whose seed is
//! derived from a base seed plus a path of stream identifiers. Two streams with
//! different paths are independent, and a stream can be recreated at any point
//! (e.g. after resuming from a checkpoint) without carrying generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags, so unrelated consumers of one base seed never collide.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const EPOCH: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const CORRUPT: u64 = 4;
    pub const POOL: u64 = 5;
    pub const ANNOTATE: u64 = 6;
    pub const FEATURES: u64 = 7;
    pub const REPLICATE: u64 = 8;
    pub const GRADCHECK: u64 = 9;
    pub const TRUTH: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of identifiers into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Generator for the stream identified by `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
