//! Named random sub-streams derived from a single experiment seed.
//!
//! Every consumer of randomness (data generation, splitting, batch sampling,
//! weight init, proxy pool sampling) draws from its own ChaCha stream so one
//! component can be perturbed without shifting the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: &str = "data";
pub const SPLIT: &str = "split";
pub const SAMPLER: &str = "sampler";
pub const INIT: &str = "init";
pub const POOL: &str = "pool";

/// Deterministic RNG for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
