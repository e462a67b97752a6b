//! Seed splitting.
//!
//! All randomness derives from one 64-bit seed. Each subsystem draws from its
//! own ChaCha stream (the stream id is the counter-mode nonce), so adding draws
//! in one subsystem never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers, one per consumer of randomness.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const ENTITY_EMB: u64 = 2;
    pub const RELATION_EMB: u64 = 3;
    pub const PARAMS: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const NEGATIVES: u64 = 6;
    pub const CORRUPTION: u64 = 7;
    pub const DEGREE_CAP: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const SYNTH: u64 = 10;
    pub const INFLUENCE: u64 = 11;
    pub const GRADCHECK: u64 = 12;
}

/// Rng for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Rng for `(seed, stream)` further keyed by `sub`, e.g. a node id or a
/// hashed entity name.
pub fn substream(seed: u64, stream: u64, sub: u64) -> Rng {
    let mixed = seed ^ sub.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(stream);
    rng
}

/// 64-bit FNV-1a, used to key per-name streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
