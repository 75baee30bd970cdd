//! Seeded randomness.
//!
//! All randomized work in the toolkit draws from [`ChaCha8Rng`] seeded with
//! `seed_from_u64`. ChaCha8 is a fixed, platform-independent stream cipher,
//! so the same seed yields the same stream on every platform. Gaussian draws
//! use `rand_distr::StandardNormal` (ziggurat).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut Prng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Prng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
