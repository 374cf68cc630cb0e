//! Seeded, splittable randomness.
//!
//! All randomness in the crate flows from one root seed. Component streams
//! are derived by hashing `(seed, label)` so that independent pipeline
//! stages (data generation, training, pad pools, attack cells) never share
//! a stream and remain reproducible regardless of evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Derive an independent RNG stream from a root seed and a label.
pub fn derive(seed: u64, label: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derive a child seed (for handing to components that take `u64` seeds).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
