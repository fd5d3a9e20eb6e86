//! Seeded random number generators.
//!
//! Every source of randomness in the pipeline is a [`ChaCha8Rng`] derived
//! from a user-visible `u64` seed, optionally namespaced by a short tag so
//! that independent subsystems (weight init, data sampling, cropping, ...)
//! draw from decorrelated streams while staying reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A generator seeded directly from `seed`.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A generator for the sub-stream identified by `tag`.
///
/// The tag is hashed (FNV-1a) and mixed into the seed with a splitmix64
/// finalizer, so distinct tags yield statistically independent streams while
/// `derive(seed, tag)` stays stable across runs and platforms.
pub fn derive(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ fnv1a(tag)))
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
