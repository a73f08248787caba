//! Stable hashing for seed derivation and fold assignment.

use sha2::{Digest, Sha256};

/// Collision-resistant 64-bit key for `(seed, name)`, stable across runs,
/// platforms, and input ordering. Used for fold assignment and for deriving
/// per-slide sub-seeds.
pub fn stable_hash64(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}
