//! Named random streams.
//!
//! Every stage draws from its own generator whose seed is a hash of the run
//! seed and the stage name, so inserting a new stage never shifts the numbers
//! an existing stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Derives the seed of stream `name` under the run seed `seed`.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Opens the stream `name` of run `seed`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(seed, name))
}

/// A generator seeded directly, for per-sample seeds that are stored alongside data.
pub fn seeded(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}
