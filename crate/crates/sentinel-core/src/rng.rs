//! Seed derivation so every pipeline stage gets an independent,
//! reproducible stream from the single run seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Derive a child seed from a parent seed and a textual tag (stage name,
/// epoch index, sample index...). Same inputs, same child, always.
pub fn derive_seed(parent: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, folded with the parent.
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ parent.rotate_left(17);
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

pub fn seeded(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Fisher-Yates shuffle, pinned here so the visitation order never
/// depends on upstream crate internals.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha20Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
