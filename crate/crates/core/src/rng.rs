//! Named, per-purpose random streams derived from one root seed.
//!
//! A stream is identified by `(root seed, purpose, index)`. Two calls with the
//! same identity always yield the same generator, independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    root: u64,
}

impl Streams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn stream(&self, purpose: &str, index: u64) -> StreamRng {
        let mut hasher = Sha256::new();
        hasher.update(self.root.to_le_bytes());
        hasher.update((purpose.len() as u64).to_le_bytes());
        hasher.update(purpose.as_bytes());
        hasher.update(index.to_le_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Child stream family; `purpose` is appended to every derived name.
    pub fn derive(&self, purpose: &str, index: u64) -> Streams {
        use rand::RngCore;
        Streams::new(self.stream(purpose, index).next_u64())
    }
}
