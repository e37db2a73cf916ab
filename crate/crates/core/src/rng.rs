//! Named random streams derived from a master seed.
//!
//! Every stochastic step (site shuffles, Poisson batches, DP noise, synthetic
//! data) draws from a stream keyed by the master seed and a path of labels,
//! so results never depend on scheduling order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// Hash `(master, labels...)` down to a 64-bit seed.
pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for label in labels {
        // length prefix keeps ["ab","c"] and ["a","bc"] apart
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, labels: &[&str]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, labels))
}
