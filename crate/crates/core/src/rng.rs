//! Seed derivation. Every random stream is keyed by integers, never by
//! execution order, so results do not depend on thread count or chunking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of keys into one 64-bit seed.
pub fn derive_seed(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x5EED_0F_D15C_u64, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Independent generator for the given key path.
pub fn stream(keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(keys))
}

/// Domain tags keep unrelated consumers of the same seed apart.
pub mod tag {
    pub const REAL_TRAIN: u64 = 1;
    pub const TEST: u64 = 2;
    pub const SAMPLER: u64 = 3;
    pub const REFERENCE: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const PROJECTION: u64 = 7;
    pub const INIT_POOL: u64 = 8;
}
