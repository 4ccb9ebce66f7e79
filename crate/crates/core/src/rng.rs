//! Seeded randomness.
//!
//! Every random draw in the lab comes from a ChaCha8 stream keyed by
//! `seed ^ tag`, where `tag` names the consumer. Components therefore never
//! share a stream: toggling augmentation does not move weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Per-component stream tags.
pub mod tag {
    pub const INIT: u64 = 0x1a17_0000_0000_0001;
    pub const DATA: u64 = 0x1a17_0000_0000_0002;
    pub const TEST_DATA: u64 = 0x1a17_0000_0000_0003;
    pub const SPLIT: u64 = 0x1a17_0000_0000_0004;
    pub const NOISE: u64 = 0x1a17_0000_0000_0005;
    pub const SHUFFLE: u64 = 0x1a17_0000_0000_0006;
    pub const AUGMENT: u64 = 0x1a17_0000_0000_0007;
    pub const ATTACK: u64 = 0x1a17_0000_0000_0008;
    pub const EVAL_ATTACK: u64 = 0x1a17_0000_0000_0009;
    pub const GRAD_CHECK: u64 = 0x1a17_0000_0000_000a;
    pub const VAL_NOISE: u64 = 0x1a17_0000_0000_000b;
}

pub fn component_rng(seed: u64, tag: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed ^ tag)
}

/// Derives an independent sub-stream (per epoch, per batch) from a component stream.
pub fn sub_rng(seed: u64, tag: u64, index: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(index);
    rng
}

/// SplitMix64-style mixing of a seed with two indices (epoch, batch).
pub fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
