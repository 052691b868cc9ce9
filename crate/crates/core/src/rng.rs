//! Seeded randomness. Nothing in the crate draws from a global RNG: every
//! random quantity comes from a [`NoiseStream`] constructed from an explicit
//! seed, so a run is reproducible from its configuration alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Image;

/// A deterministic stream of standard normal and uniform draws.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// A stream whose seed is derived from `seed` and a purpose tag, so
    /// independent consumers (initial noise, augmentations, restarts) never
    /// share draws.
    pub fn derived(seed: u64, tag: u64) -> Self {
        Self::new(derive_seed(seed, tag))
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn gaussian(&mut self, h: usize, w: usize, c: usize) -> Image {
        let values = (0..h * w * c).map(|_| self.normal()).collect();
        Image::from_vec(h, w, c, values).expect("length matches shape")
    }

    pub fn gaussian_like(&mut self, like: &Image) -> Image {
        let (h, w, c) = like.shape();
        self.gaussian(h, w, c)
    }
}

/// SplitMix64-style mixing of a seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
