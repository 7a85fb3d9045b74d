//! Seed derivation for independent random streams.
//!
//! Every consumer of randomness (a device during data generation, the
//! participant sampler at a given round, a local solver's shuffle) draws
//! from its own ChaCha8 stream whose seed is a SplitMix64 hash of the
//! experiment seed and a short path of integer tags. Streams therefore do
//! not depend on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains, kept distinct so two consumers never share a stream.
pub mod domain {
    pub const SHARED_MODEL: u64 = 1;
    pub const DEVICE_DATA: u64 = 2;
    pub const SIZES: u64 = 3;
    pub const PARTICIPANTS: u64 = 4;
    pub const SOLVER: u64 = 5;
    pub const PARTITION: u64 = 6;
    pub const INIT: u64 = 7;
    pub const ENSEMBLE: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a base seed with a path of tags into a new 64-bit seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// A ChaCha8 stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
