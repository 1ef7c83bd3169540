//! Deterministic RNG streams.
//!
//! Every random draw in the simulator comes from a stream keyed by the run
//! seed plus a purpose tag and indices (client id, round, shadow index, and
//! so on). Streams are mutually independent: consuming one never shifts
//! another. That is what makes concurrent and serial execution bit-identical,
//! and what keeps a client's deformation parameter stable when the population
//! size changes.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Purpose tags. Each distinct source of randomness gets its own tag so key
/// paths never collide across subsystems.
pub mod tag {
    pub const MODEL_INIT: u64 = 0x01;
    pub const PARTITION: u64 = 0x02;
    pub const DEFORM: u64 = 0x03;
    pub const TEST_DEFORM: u64 = 0x04;
    pub const SHADOW_DEFORM: u64 = 0x05;
    pub const PROFILE: u64 = 0x06;
    pub const BATCH: u64 = 0x07;
    pub const SHADOW_SPLIT: u64 = 0x08;
    pub const SHADOW_INIT: u64 = 0x09;
    pub const SHADOW_BATCH: u64 = 0x0a;
    pub const ATTACK: u64 = 0x0b;
    pub const GLYPH_TEMPLATE: u64 = 0x0c;
    pub const GLYPH_SAMPLE: u64 = 0x0d;
    pub const TEACHER: u64 = 0x0e;
    pub const SYNTH_SAMPLE: u64 = 0x0f;
    pub const RISK: u64 = 0x10;
    pub const PROBE_DATA: u64 = 0x11;
    pub const PROBE_INIT: u64 = 0x12;
    pub const PROBE_RUN: u64 = 0x13;
    pub const HOLDOUT: u64 = 0x14;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a key path.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |h, &k| splitmix64(h ^ splitmix64(k)))
}

/// Deterministic RNG for the given key path.
pub fn rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}
