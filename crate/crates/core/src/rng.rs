//! Deterministic, collision-free random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `(master_seed, trial, purpose)`
//! and positioned on stream number `index` (usually a user index). Distinct
//! tuples map to distinct key/stream pairs, so no two streams share a prefix
//! and results do not depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Perturb = 1,
    Attack = 2,
    AttackPlan = 3,
    Dataset = 4,
    FakeSelection = 5,
    Targets = 6,
    Shuffle = 7,
}

/// Source of all randomness for one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPolicy {
    pub master_seed: u64,
}

impl RngPolicy {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Independent stream for `(trial, purpose, index)`.
    pub fn stream(&self, trial: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&trial.to_le_bytes());
        key[16..24].copy_from_slice(&(purpose as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }
}
