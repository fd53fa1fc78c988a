//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream derived from the
//! run seed and a fixed per-purpose stream tag, so adding draws in one
//! component never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Values are arbitrary but frozen: changing one changes outputs.
pub mod tag {
    pub const CORPUS: u64 = 0x10;
    pub const MIXING: u64 = 0x11;
    pub const SPLITS: u64 = 0x12;
    pub const INIT: u64 = 0x20;
    pub const PAIRS: u64 = 0x30;
    pub const AUGMENT: u64 = 0x31;
    pub const SWN: u64 = 0x32;
    pub const EVAL_NEGATIVES: u64 = 0x40;
    pub const SWEEP: u64 = 0x41;
    pub const GENERATOR: u64 = 0x50;
    pub const HOLDOUT: u64 = 0x51;
    pub const BENCH: u64 = 0x60;
}

/// A stream keyed by `(seed, tag)`.
pub fn stream(seed: u64, tag: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// A stream keyed by `(seed, tag, index)`, for per-item randomness that must
/// not depend on iteration order.
pub fn indexed_stream(seed: u64, tag: u64, index: u64) -> Rng {
    let mixed = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    stream(mixed, tag)
}
