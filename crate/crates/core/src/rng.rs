//! Seed derivation.
//!
//! A single global seed fans out to independent streams. Every stream seed is
//! `mix(mix(...mix(global ^ TAG)...) ^ part)`, where `mix` is the SplitMix64
//! finalizer, `TAG` names the stream and the parts are stream coordinates
//! (client id, round). Each derived seed feeds a ChaCha8 generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags.
pub mod stream {
    pub const DATA: u64 = 0x6461_7461;
    pub const INIT: u64 = 0x696e_6974;
    pub const SELECT: u64 = 0x7365_6c65;
    pub const CLIENT: u64 = 0x636c_6965;
    pub const DISTILL: u64 = 0x6b64_6b64;
    pub const USER_INIT: u64 = 0x7573_6572;
}

#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(global: u64, tag: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(global ^ tag), |acc, &p| mix(acc ^ p))
}

pub fn stream_rng(global: u64, tag: u64, parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(global, tag, parts))
}
