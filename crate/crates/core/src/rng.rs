//! Seeded random streams.
//!
//! One master seed fans out into independent, named streams (parameter init,
//! batching, reparameterization noise), so two runs that differ only in which
//! streams they consume still agree on everything else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream `tag`/`index` derived from `seed`.
pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
