//! Differentiable augmentations applied before the text-image embedder.
//!
//! Geometric views combine a random crop-and-resize, a horizontal flip and a
//! small rotation into a single bilinear warp. When more than one view is
//! requested and noise mixing is enabled, the last view blends the image
//! with clipped Gaussian noise instead.

use serde::{Deserialize, Serialize};

use super::warp::LinearWarp;
use crate::rng::NoiseStream;
use crate::{Error, Image, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// crop side as a fraction of the image side, sampled uniformly
    pub min_crop: f64,
    pub max_crop: f64,
    pub flip_prob: f64,
    /// maximum rotation in degrees, sampled symmetrically
    pub max_rotation_deg: f64,
    /// blend weight of the noise view; 0 disables it
    pub noise_mix: f64,
    /// every view is the identity
    pub identity_only: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            min_crop: 0.7,
            max_crop: 1.0,
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
            noise_mix: 0.2,
            identity_only: false,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self { identity_only: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min_crop && self.min_crop <= self.max_crop && self.max_crop <= 1.0) {
            return Err(Error::InvalidArgument("crop fractions must satisfy 0 < min <= max <= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.noise_mix) {
            return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        if !self.max_rotation_deg.is_finite() || self.max_rotation_deg < 0.0 {
            return Err(Error::InvalidArgument("max_rotation_deg must be non-negative".into()));
        }
        Ok(())
    }
}

/// One augmentation, linear in the image.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentView {
    Warp(LinearWarp),
    /// `(1 − γ)·x + γ·noise`
    NoiseMix { gamma: f64, noise: Image },
}

impl AugmentView {
    pub fn apply(&self, x: &Image) -> Result<Image> {
        match self {
            AugmentView::Warp(w) => w.apply(x),
            AugmentView::NoiseMix { gamma, noise } => x.axpby(1.0 - gamma, noise, *gamma),
        }
    }

    pub fn adjoint(&self, g: &Image) -> Result<Image> {
        match self {
            AugmentView::Warp(w) => w.adjoint(g),
            AugmentView::NoiseMix { gamma, noise } => {
                g.ensure_same_shape(noise)?;
                Ok(g.scale(1.0 - gamma))
            }
        }
    }
}

/// Draws `m` augmentations for an image of the given shape.
pub fn sample_views(
    shape: (usize, usize, usize),
    m: usize,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<Vec<AugmentView>> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one augmented view".into()));
    }
    cfg.validate()?;
    let (h, w, c) = shape;
    if cfg.identity_only {
        return Ok((0..m).map(|_| AugmentView::Warp(LinearWarp::identity((h, w)))).collect());
    }
    let mut rng = NoiseStream::new(seed);
    let geometric = if m >= 2 && cfg.noise_mix > 0.0 { m - 1 } else { m };
    let mut views = Vec::with_capacity(m);
    for _ in 0..geometric {
        let crop = rng.uniform_in(cfg.min_crop, cfg.max_crop);
        let (ch, cw) = (crop * h as f64, crop * w as f64);
        let cy = rng.uniform_in(ch / 2.0, h as f64 - ch / 2.0);
        let cx = rng.uniform_in(cw / 2.0, w as f64 - cw / 2.0);
        let flip = rng.uniform() < cfg.flip_prob;
        let angle = rng.uniform_in(-cfg.max_rotation_deg, cfg.max_rotation_deg).to_radians();
        let (sin, cos) = angle.sin_cos();
        let (hh, hw) = (h as f64 / 2.0, w as f64 / 2.0);
        let warp = LinearWarp::from_fn((h, w), (h, w), |y, x| {
            // output offset from centre, scaled to the crop, optionally flipped, rotated
            let mut u = (x - hw) * crop;
            let v = (y - hh) * crop;
            if flip {
                u = -u;
            }
            (cy + sin * u + cos * v, cx + cos * u - sin * v)
        });
        views.push(AugmentView::Warp(warp));
    }
    if geometric < m {
        let mut noise = rng.gaussian(h, w, c);
        noise.as_slice_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        views.push(AugmentView::NoiseMix { gamma: cfg.noise_mix, noise });
    }
    Ok(views)
}

/// The augmented views of `x`.
pub fn augment(x: &Image, m: usize, seed: u64, cfg: &AugmentConfig) -> Result<Vec<Image>> {
    sample_views(x.shape(), m, seed, cfg)?.iter().map(|v| v.apply(x)).collect()
}
