//! Seed derivation utilities.
//!
//! Every randomized stage derives its own child seed from a master seed and a
//! stream label, so parallel and serial execution orders produce identical
//! results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche behavior for seed mixing.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream index.
pub fn child_seed(parent: u64, stream: u64) -> u64 {
    splitmix64(parent ^ splitmix64(stream))
}

/// Derive a child seed from a parent seed and a string label.
pub fn labeled_seed(parent: u64, label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    child_seed(parent, h)
}

/// Deterministic RNG used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
