//! Deterministic RNG stream derivation.
//!
//! Every random decision in a run draws from a ChaCha stream whose seed is a
//! mix of the run seed and a fixed tuple of coordinates (phase, round,
//! client, purpose). Streams never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream purposes. Values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Sampling = 1,
    LocalTraining = 2,
    Partition = 3,
    Masking = 4,
    Corpus = 5,
    Synthetic = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`, order-sensitive.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, purpose: Purpose, parts: &[u64]) -> SimRng {
    let mut all = Vec::with_capacity(parts.len() + 1);
    all.push(purpose as u64);
    all.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(mix(seed, &all))
}

/// Stable 64-bit FNV-1a hash for strings (ids, tokens).
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
