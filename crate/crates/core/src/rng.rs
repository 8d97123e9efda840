//! Counter-based seeding: every consumer derives its own stream from the
//! master seed plus a tuple of counters, so work can be reordered or
//! parallelised without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of counters into a new seed.
pub fn derive(seed: u64, counters: &[u64]) -> u64 {
    counters
        .iter()
        .fold(splitmix(seed), |acc, &c| splitmix(acc ^ splitmix(c)))
}

pub fn stream(seed: u64, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, counters))
}

/// Stream tags, one per independent consumer.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const VIEW_SELECT: u64 = 4;
    pub const DATA: u64 = 5;
    pub const PGD_SUBSET: u64 = 6;
    pub const KEY: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const HEAD: u64 = 9;
    pub const EMBED: u64 = 10;
    pub const ATTACK: u64 = 11;
    pub const SURROGATE: u64 = 12;
    pub const QUEUE: u64 = 13;
}
