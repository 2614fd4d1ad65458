//! Deterministic seed derivation.
//!
//! All randomness in a run flows from one root seed through named streams, so
//! any stage (an iteration, an MC pass, a dropout draw) can be replayed in
//! isolation — this is what makes `--resume` exact.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed, a purpose tag, and an index.
pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix(base);
    for &b in tag.as_bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h ^ index)
}

/// A seeded RNG for the given stream.
pub fn rng(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag, index))
}
