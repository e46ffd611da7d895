//! Counter-based random streams.
//!
//! Every unit of parallel work (a launch, a training shuffle, a weight
//! initialisation) draws from its own ChaCha stream. The 256-bit key comes
//! from the global seed and the 64-bit stream id from a hashed work key, so
//! the numbers a task sees never depend on which thread runs it or when.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Domain labels keep streams used for different purposes disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Tracking = 1,
    Jitter = 2,
    Phantom = 3,
    Noise = 4,
    Init = 5,
    Shuffle = 6,
    Augment = 7,
    Test = 8,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash an ordered tuple of counters into a stream id.
pub fn stream_id(domain: Domain, key: &[u64]) -> u64 {
    let mut h = mix64(domain as u64 ^ 0x9E37_79B9_7F4A_7C15);
    for &k in key {
        h = mix64(h ^ k.wrapping_mul(0xA076_1D64_78BD_642F));
    }
    h
}

/// Open the stream identified by `(seed, domain, key)`.
pub fn stream(seed: u64, domain: Domain, key: &[u64]) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(domain, key));
    rng.set_word_pos(0);
    rng
}

/// Tracking stream keyed by (global seed, seed index, repeat index, alpha index).
pub fn tracking_stream(seed: u64, seed_index: u64, repeat: u64, alpha_index: u64) -> Stream {
    stream(seed, Domain::Tracking, &[seed_index, repeat, alpha_index])
}
