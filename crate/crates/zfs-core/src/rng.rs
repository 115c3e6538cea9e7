//! Seed derivation.
//!
//! All randomness in a run flows from one config seed. Derived generators are
//! keyed by a purpose string plus integer coordinates (epoch, image index, …)
//! so that workers can draw independently of scheduling order: the stream for
//! a given (seed, purpose, coords) is fixed no matter which thread asks for it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a generator from the run seed, a purpose label, and coordinates.
pub fn derive(seed: u64, purpose: &str, coords: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([purpose.len() as u8]);
    h.update(purpose.as_bytes());
    for c in coords {
        h.update(c.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
