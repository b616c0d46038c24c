//! Seed derivation and counter-based random streams.
//!
//! A single master seed fans out into labelled sub-seeds, so every random
//! choice in an experiment is recoverable from one number.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a sub-seed from `(parent, label, index)` with SHA-256.
pub fn derive(parent: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Seeded stream RNG used for sequential draws.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateless 64-bit draw keyed on `(seed, a, b, c)`.
///
/// Each key gets its own value regardless of the order in which keys are
/// queried, so sample paths can be generated for any `(worker, step)` cell
/// independently.
pub fn counter_u64(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b.rotate_left(21));
    splitmix64(h ^ c.rotate_left(42))
}

/// Maps a uniform 64-bit word onto `[0, len)` by widening multiplication.
///
/// The bias is at most `len / 2^64`.
pub fn below(word: u64, len: usize) -> usize {
    ((word as u128 * len as u128) >> 64) as usize
}
