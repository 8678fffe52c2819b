//! Stateless randomness keyed on query content.
//!
//! Every random draw is a pure function of a key (seed, image, region,
//! object index, purpose tag), so results do not depend on evaluation order
//! or on which thread asked.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a word sequence into one 64-bit key. Order-sensitive.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(splitmix64(words.len() as u64), |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// FNV-1a over the bytes of `s`; stable across processes and platforms.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Coordinate quantized to 1e-3 pixels, as a key word.
pub fn quantize(v: f64) -> u64 {
    (v * 1000.0).round() as i64 as u64
}

/// A fresh generator for one keyed event.
pub fn stream(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(words))
}
