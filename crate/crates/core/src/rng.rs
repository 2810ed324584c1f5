//! Deterministic RNG substream derivation.
//!
//! Every random draw in the system comes from a ChaCha stream keyed by
//! `(run seed, purpose tag, a, b)`. Because streams are derived functionally
//! rather than advanced statefully, reproducing any point of a run (including
//! checkpoint resume) only requires knowing the seed and the logical position
//! (epoch, step, record index), never a serialized generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep unrelated consumers on disjoint substreams.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUG_VIEW1: u64 = 3;
    pub const AUG_VIEW2: u64 = 4;
    pub const AUG_EVAL: u64 = 5;
    pub const DROP_PATH_ONLINE: u64 = 6;
    pub const DROP_PATH_TARGET: u64 = 7;
    pub const SYNTH: u64 = 8;
    pub const PROBE: u64 = 9;
}

/// Derive an independent generator for `(seed, purpose, a, b)`.
pub fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
