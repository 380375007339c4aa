//! Deterministic seed derivation.
//!
//! Every random draw in the simulator comes from a ChaCha stream whose seed is
//! derived from the run seed and a tuple of stream coordinates, so results do
//! not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and stream coordinates.
pub fn derive_seed(parent: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(mix64(parent), |acc, &c| mix64(acc ^ mix64(c)))
}

pub fn rng_from(parent: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, coords))
}

/// Stream tags, so different consumers of the same run seed never collide.
pub mod stream {
    pub const BANK: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const BATCH_ORDER: u64 = 3;
    pub const ACQUISITION: u64 = 4;
    pub const CLASSIFIER_INIT: u64 = 5;
    pub const REPLAY: u64 = 6;
    pub const EVAL: u64 = 7;
}
