//! Structure, style and regularisation losses on the denoised estimate.
//!
//! Every loss comes with its gradient with respect to the feature or image it
//! consumes; [`objective::Objective`] chains those through the extractors to
//! produce the image-space gradient used by the sampler.

pub mod loss;
pub mod objective;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use loss::{
    contrastive_loss, directional_target, embed_ensemble, l_clip, l_cont, l_rng, l_sem, l_ssim,
    l_sty, range_loss, self_similarity, semantic_divergence, style_loss, ssim_loss, ValueGrad,
};
pub use objective::{Evaluation, GuidanceLoss, GuidanceTask, Objective};

/// Per-patch keys from one attention layer and the final classification
/// token of a structure/semantic extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// `n × d_k`, one row per spatial token.
    pub keys: Array2<f64>,
    pub cls: Array1<f64>,
}

impl FeatureBundle {
    pub fn new(keys: Array2<f64>, cls: Array1<f64>) -> Result<Self> {
        if keys.nrows() == 0 {
            return Err(Error::InvalidArgument("feature bundle needs at least one key".into()));
        }
        if keys.iter().chain(cls.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature bundle".into()));
        }
        Ok(Self { keys, cls })
    }

    pub fn ensure_compatible(&self, other: &FeatureBundle) -> Result<()> {
        if self.keys.dim() != other.keys.dim() || self.cls.len() != other.cls.len() {
            return Err(Error::shape(
                (self.keys.dim(), self.cls.len()),
                (other.keys.dim(), other.cls.len()),
            ));
        }
        Ok(())
    }
}

/// A text or image embedding, possibly a concatenation over an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub v: Array1<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn raw(v: Array1<f64>) -> Self {
        Self { v, normalized: false }
    }

    pub fn unit(v: Array1<f64>) -> Result<Self> {
        let n = l2(&v);
        if n < NORM_EPS {
            return Err(Error::ZeroNorm("embedding"));
        }
        Ok(Self { v: v / n, normalized: true })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

/// Translation mode: guide towards a text prompt or a style image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Text,
    Image,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Text => "text",
            Mode::Image => "image",
        }
    }
}

/// All loss weights and loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceWeights {
    /// contrastive structure loss
    pub lambda_cont: f64,
    /// self-similarity structure loss
    pub lambda_ssim: f64,
    /// directional CLIP loss (text mode) or [CLS] style loss (image mode)
    pub lambda_style: f64,
    /// semantic divergence loss
    pub lambda_sem: f64,
    /// range regulariser
    pub lambda_rng: f64,
    /// pixel term inside the image-mode style loss
    pub lambda_mse: f64,
    /// weight of the negated source-text embedding in the CLIP target
    pub lambda_s: f64,
    /// weight of the source-image embedding in the CLIP target
    pub lambda_i: f64,
    /// contrastive temperature
    pub tau: f64,
    /// optional identity hook
    pub lambda_id: f64,
    /// use the plain global CLIP loss instead of the directional one
    pub global_clip: bool,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self {
            lambda_cont: 200.0,
            lambda_ssim: 100.0,
            lambda_style: 2000.0,
            lambda_sem: 1000.0,
            lambda_rng: 200.0,
            lambda_mse: 1.5,
            lambda_s: 0.4,
            lambda_i: 0.2,
            tau: 0.07,
            lambda_id: 0.0,
            global_clip: false,
        }
    }
}

impl GuidanceWeights {
    /// Every weight zero: the sampler reduces to plain ancestral sampling.
    pub fn zero() -> Self {
        Self {
            lambda_cont: 0.0,
            lambda_ssim: 0.0,
            lambda_style: 0.0,
            lambda_sem: 0.0,
            lambda_rng: 0.0,
            lambda_id: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_cont", self.lambda_cont),
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_style", self.lambda_style),
            ("lambda_sem", self.lambda_sem),
            ("lambda_rng", self.lambda_rng),
            ("lambda_mse", self.lambda_mse),
            ("lambda_s", self.lambda_s),
            ("lambda_i", self.lambda_i),
            ("tau", self.tau),
            ("lambda_id", self.lambda_id),
        ];
        for (name, v) in all {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite")));
            }
        }
        for (name, v) in &all[..6] {
            if *v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative")));
            }
        }
        if self.lambda_id < 0.0 {
            return Err(Error::InvalidArgument("lambda_id must be non-negative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidArgument("tau must be positive".into()));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        [
            self.lambda_cont,
            self.lambda_ssim,
            self.lambda_style,
            self.lambda_sem,
            self.lambda_rng,
            self.lambda_id,
        ]
        .iter()
        .all(|v| *v == 0.0)
    }
}

/// Unweighted per-term loss values for one evaluation. Terms that were not
/// evaluated (zero weight, or no predecessor for the divergence term) are 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cont: f64,
    pub ssim: f64,
    /// directional CLIP loss in text mode, [CLS] style loss in image mode
    pub style: f64,
    pub sem: f64,
    pub rng: f64,
    pub id: f64,
}

/// `λ1·cont + λ2·ssim + λ3·style + λ4·sem + λ5·rng + λ_id·id`.
pub fn total_loss(terms: &LossTerms, w: &GuidanceWeights) -> f64 {
    w.lambda_cont * terms.cont
        + w.lambda_ssim * terms.ssim
        + w.lambda_style * terms.style
        + w.lambda_sem * terms.sem
        + w.lambda_rng * terms.rng
        + w.lambda_id * terms.id
}

pub(crate) const NORM_EPS: f64 = 1e-12;

pub fn l2(v: &Array1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; rejects vectors with norm below `1e-12`.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let (na, nb) = (l2(a), l2(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(Error::ZeroNorm("cosine similarity"));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Gradient of `u = v/‖v‖` pulled back: `(g − u(u·g)) / ‖v‖`.
pub fn normalize_vjp(v: &Array1<f64>, g: &Array1<f64>) -> Array1<f64> {
    let n = l2(v);
    let u = v / n;
    let ug = u.dot(g);
    (g - &(&u * ug)) / n
}
