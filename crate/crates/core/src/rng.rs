//! Counter-based seeding.
//!
//! Every random draw in the crate comes from a generator seeded by mixing a
//! base seed with a tuple of counters (layer id, step, sample index, ...).
//! Nothing carries generator state across calls, so any step can be replayed
//! from its counters alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds a list of counters into one 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(parts: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, parts: &[u64]) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(parts));
    idx
}

// Stream tags keep independent uses of one base seed apart.
pub(crate) const STREAM_DROPOUT: u64 = 0xD0;
pub(crate) const STREAM_IMAGE_NOISE: u64 = 0x11;
pub(crate) const STREAM_TEXT_NOISE: u64 = 0x77;
pub(crate) const STREAM_SHUFFLE: u64 = 0x5F;
pub(crate) const STREAM_INIT: u64 = 0x1A;
pub(crate) const STREAM_PREDICT: u64 = 0xE7;
pub(crate) const STREAM_SPLIT: u64 = 0x59;
