//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from a master seed, a stream tag and an index.
pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

/// A generator seeded from [`derive`].
pub fn rng_for(master: u64, stream: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive(master, stream, index))
}

/// Named stream tags so different consumers of one master seed never share draws.
pub mod stream {
    pub const ENVIRONMENT: u64 = 1;
    pub const PROBLEM: u64 = 2;
    pub const PLANNER: u64 = 3;
    pub const KEYCONFIG: u64 = 4;
    pub const TRAINING: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SAMPLING: u64 = 7;
    pub const TRAJOPT_SEEDS: u64 = 8;
    pub const HELDOUT: u64 = 9;
}
