//! Seed derivation.
//!
//! Every random decision draws from a `ChaCha8Rng` seeded with
//! `mix(seed, stream, index)`, where `stream` names the consumer (split
//! construction, filter training, ...) and `index` is usually the round.
//! The mix is two rounds of SplitMix64 finalization:
//!
//! ```text
//! mix(s, t, i) = fmix(s ^ fmix(t * 0x9E3779B97F4A7C15 ^ (i + 1) * 0xD1B54A32D192ED03))
//! ```
//!
//! so consecutive rounds get unrelated streams while staying reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    InitialDraw = 2,
    Filter = 3,
    Classifier = 4,
    Selection = 5,
    FinalClassifier = 6,
    Generator = 7,
}

fn fmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, stream: Stream, index: u64) -> u64 {
    let tag =
        (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    fmix(seed ^ fmix(tag))
}

pub fn rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream, index))
}
