//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! derived from one master seed.
//!
//! - Worker `i` of a batch uses `seed + i` (wrapping).
//! - Independent purposes inside one run use distinct ChaCha stream ids on
//!   the same seed, see [`stream`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn worker_seed(seed: u64, worker: u64) -> u64 {
    seed.wrapping_add(worker)
}

/// Generator for a named purpose within a run.
pub fn stream(seed: u64, stream_id: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream_id);
    r
}

pub mod streams {
    pub const TRAIN_DATA: u64 = 1;
    pub const TRAIN_NOISE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const TASK: u64 = 5;
    pub const VQA: u64 = 6;
    pub const EMBED: u64 = 7;
}
