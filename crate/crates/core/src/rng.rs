//! Seed derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha stream whose
//! seed is a hash of (base seed, stream tag, index...). Nothing carries RNG
//! state across steps, which is what makes resumed runs and parallel data
//! generation reproduce the serial byte stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with any number of indices into a new seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(base: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, parts))
}

/// Stream tags keep unrelated consumers of the same base seed apart.
pub mod stream {
    pub const CROP: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const PLAN: u64 = 3;
    pub const SUBJECT: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const VALIDATION: u64 = 7;
    pub const FINETUNE: u64 = 8;
}
