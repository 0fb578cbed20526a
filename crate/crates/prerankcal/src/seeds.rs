//! Splittable counter-based seeds.
//!
//! All stochastic work in the crate derives per-task seeds from a base
//! seed and one or more indices through a SplitMix64 finalizer. Results
//! are therefore independent of evaluation order and thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed for `index` under `base`.
#[inline]
pub fn split(base: u64, index: u64) -> u64 {
    mix(base.wrapping_add(GOLDEN).wrapping_add(index.wrapping_mul(GOLDEN)))
}

/// Two-level split, e.g. `(base, step, row)`.
#[inline]
pub fn split2(base: u64, a: u64, b: u64) -> u64 {
    split(split(base, a), b)
}

/// Deterministic RNG for a derived seed.
#[inline]
pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
