//! Seeded random streams. All randomness in the crate is derived from an
//! explicit seed through named sub-streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives a child seed from `seed` and a stream name.
pub fn substream(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Derives a child seed from `seed` and an index (candidate, episode, ...).
pub fn indexed(seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn stream(seed: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(substream(seed, name))
}

pub fn from_seed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}
