//! Seed hierarchy. Every random stream in the crate is derived from a global seed
//! and a purpose string, so adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a generator keyed by `(seed, purpose)`.
pub fn derive(seed: u64, purpose: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derives a child seed, for APIs that take a plain integer seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    use rand::RngCore;
    derive(seed, purpose).next_u64()
}
