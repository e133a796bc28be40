//! Counter-based random streams.
//!
//! Every stochastic component draws from its own stream keyed by the master
//! seed plus a list of tag words (e.g. client id, round index). Streams are
//! independent of execution order and thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream purpose tags. Kept as explicit constants so key derivation is
/// stable across refactors.
pub mod tag {
    pub const PARTITION: u64 = 1;
    pub const INIT_PARAMS: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const CLIENT_TRAIN: u64 = 4;
    pub const DP_NOISE: u64 = 5;
    pub const DATASET: u64 = 6;
    pub const TEMPLATE: u64 = 7;
    pub const PROBE: u64 = 8;
}

/// Derives a deterministic ChaCha stream from `(master_seed, tags...)`.
pub fn stream(master_seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    for t in tags {
        hasher.update(t.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
