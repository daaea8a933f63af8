//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed, so adding draws in one subsystem never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. Values are part of the reproducibility contract.
pub mod streams {
    pub const INIT_BACKBONE: u64 = 1;
    pub const INIT_PROMPT: u64 = 2;
    pub const INIT_HEAD: u64 = 3;
    pub const DATA_CENTERS: u64 = 10;
    pub const DATA_TRAIN: u64 = 11;
    pub const DATA_TEST: u64 = 12;
    pub const SHIFT: u64 = 20;
    pub const RESAMPLE: u64 = 21;
    pub const SHUFFLE: u64 = 30;
    pub const PROP1: u64 = 40;
    pub const GRADCHECK: u64 = 50;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream keyed by a (stream, index) pair, for per-restart or per-case draws.
pub fn substream(seed: u64, stream_id: u64, index: u64) -> Rng {
    stream(seed, (stream_id << 32) | (index & 0xffff_ffff))
}
