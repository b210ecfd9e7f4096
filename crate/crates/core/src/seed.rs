//! Labeled seed derivation.
//!
//! Every random stream in the toolkit comes from a parent seed and a label,
//! so a component can be re-run in isolation and still see the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Child seed for `label` under `parent`.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stream keyed by `(parent, label)`.
pub fn derived_rng(parent: u64, label: &str) -> Rng {
    rng(derive_seed(parent, label))
}
