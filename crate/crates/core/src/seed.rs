//! Named seed derivation and content fingerprints.
//!
//! All randomness in the pipeline flows from an experiment seed through
//! [`derive_seed`]; there is no global generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from a parent seed and a path of names.
///
/// The derivation is a SHA-256 over the little-endian parent and the
/// length-prefixed parts, so it is stable across platforms and releases.
pub fn derive_seed(parent: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// A ChaCha8 stream seeded from [`derive_seed`].
pub fn rng_for(parent: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, parts))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
