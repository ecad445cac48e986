//! Counter-based random streams.
//!
//! Every random draw in the engine comes from a ChaCha stream keyed by
//! `(seed, entity tags...)`, so results do not depend on thread scheduling
//! and a checkpoint only needs the master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags separating the streams used at one time step.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const WEIGHT: u64 = 2;
    pub const RESAMPLE: u64 = 3;
    pub const PROPAGATE: u64 = 4;
    pub const BARRIER: u64 = 5;
    pub const REFRESH: u64 = 6;
    pub const SMOOTH: u64 = 7;
    pub const VB_INIT: u64 = 8;
    pub const SIMULATE: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream for the entity path `tags` under `seed`.
pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for (i, &t) in tags.iter().enumerate() {
        h = splitmix64(h ^ splitmix64(t.wrapping_add((i as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407))));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Stable 64-bit tag for a user identifier (FNV-1a; must not change across releases
/// because checkpoints depend on it).
pub fn user_tag(user_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in user_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
