//! Seed derivation. Every random stream is a pure function of the run seed
//! and a path of integers, so results never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `parts` into a 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_F00D_u64, |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// Generator for the stream identified by `parts`.
pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Stream labels, so that unrelated streams never share a path.
pub mod stream {
    pub const TASK: u64 = 1;
    pub const SAMPLES: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const ROLES: u64 = 5;
    pub const PUBLIC: u64 = 6;
    pub const REDUCE: u64 = 7;
    pub const ROTATION: u64 = 8;
    pub const INIT: u64 = 9;
    pub const SELECT: u64 = 10;
    pub const CLIENT: u64 = 11;
    pub const FAMILY: u64 = 12;
}
