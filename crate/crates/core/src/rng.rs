//! Named, reproducible random streams.
//!
//! Every stream is a ChaCha8 generator whose 32-byte key is
//! `SHA-256(seed as u64 little-endian || stream name as UTF-8)`. A stream's
//! output therefore depends only on the run seed and its name, never on how
//! many other streams were created before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const TRAINING: &str = "training";

/// Derives the generator for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Generator for one training step, so batches can be re-drawn after a resume.
pub fn step_stream(seed: u64, step: u64) -> StreamRng {
    stream(seed, &format!("{TRAINING}/step/{step}"))
}

/// The standard substreams for a run.
#[derive(Debug, Clone)]
pub struct Streams {
    pub data: StreamRng,
    pub init: StreamRng,
    pub training: StreamRng,
}

pub fn seed_everything(seed: u64) -> Streams {
    Streams {
        data: stream(seed, DATA),
        init: stream(seed, INIT),
        training: stream(seed, TRAINING),
    }
}
