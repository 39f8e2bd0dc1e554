//! Named random sub-streams derived from a single master seed.
//!
//! Every consumer of randomness asks for a generator keyed by
//! `(master seed, stream name, index)`, so components can be re-seeded
//! independently and per-row / per-trial draws do not depend on the order
//! in which rows or trials are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Well-known stream names.
pub mod stream {
    pub const INIT: &str = "init";
    pub const SHUFFLE: &str = "shuffle";
    pub const ATTACK: &str = "attack";
    pub const SAMPLING: &str = "sampling";
    pub const EVAL: &str = "eval";
    pub const DATA: &str = "data";
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derive a 64-bit sub-seed for `(seed, name, index)`.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(name)).wrapping_add(splitmix(index)))
}

pub fn rng_for(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name, index))
}
