//! Named random streams derived from a single run seed.
//!
//! Every consumer of randomness (data synthesis, parameter init, shuffling,
//! dropout) asks for its own stream by name, so turning one component on or
//! off never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// A generator for the stream `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    indexed_stream(seed, name, 0)
}

/// A generator for the `index`-th member of the stream family `name`.
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
