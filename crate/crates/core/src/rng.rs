//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! master seed and a purpose tag, with the stream number set to an index
//! (round, sample, trial). Two draws with different `(tag, index)` never
//! share a stream, and the streams do not depend on thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags used across the crate.
pub mod tag {
    pub const CASCADE: &str = "cascade";
    pub const SPREAD_SAMPLE: &str = "spread-sample";
    pub const LIVE_EDGE_POOL: &str = "live-edge-pool";
    pub const SIGMA: &str = "sigma";
    pub const GENERATE: &str = "generate";
    pub const TRIAL: &str = "trial";
    pub const AUDIT: &str = "audit";
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stream for `(master, tag, index)`.
pub fn stream(master: u64, tag: &str, index: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(tag.as_bytes()).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Derives a child master seed, e.g. one per seed set or per trial.
pub fn child_seed(master: u64, tag: &str, index: u64) -> u64 {
    use rand::RngCore;
    stream(master, tag, index).next_u64()
}

/// Stable 64-bit digest of a sequence of words.
pub fn digest(words: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}
