//! Feature extractors and embedders consumed by the guidance losses.
//!
//! Implementations must be deterministic and expose a pullback so that any
//! scalar function of their outputs can be differentiated with respect to
//! the input image.

pub mod augment;
pub mod toy;
pub mod vit;
pub mod warp;

use ndarray::{Array1, Array2};

use crate::guidance::{EmbeddingVector, FeatureBundle};
use crate::{Error, Image, Result};

pub use augment::{augment, sample_views, AugmentConfig, AugmentView};
pub use toy::{ToyEmbedder, ToyIdentityEmbedder, ToyPatchExtractor};
pub use vit::{ClipEmbedder, ClipMember, EnsembleConfig, VitConfig, VitExtractor, VitModel};
pub use warp::LinearWarp;

/// Pulls cotangents on a [`FeatureBundle`] back to the input image.
pub trait FeaturePullback {
    fn pullback(&self, d_keys: Option<&Array2<f64>>, d_cls: Option<&Array1<f64>>) -> Result<Image>;
}

/// Pulls a cotangent on an output vector back to the input image.
pub trait VectorPullback {
    fn pullback(&self, d: &Array1<f64>) -> Result<Image>;
}

/// Produces structure keys from an intermediate attention layer and a
/// semantic classification token from the final layer.
pub trait StructureSemanticExtractor: Send + Sync {
    /// The spatial size the extractor expects, or `None` if it accepts any
    /// size it can tile.
    fn input_size(&self) -> Option<(usize, usize)>;

    fn extract_traced(&self, x: &Image) -> Result<(FeatureBundle, Box<dyn FeaturePullback + '_>)>;

    fn extract(&self, x: &Image) -> Result<FeatureBundle> {
        Ok(self.extract_traced(x)?.0)
    }
}

/// Joint text/image embedding space (an ensemble is a single embedder whose
/// output concatenates its members).
pub trait TextImageEmbedder: Send + Sync {
    fn input_size(&self) -> Option<(usize, usize)>;

    fn embed_dim(&self) -> usize;

    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVector>;

    fn embed_image_traced(&self, x: &Image) -> Result<(EmbeddingVector, Box<dyn VectorPullback + '_>)>;

    fn embed_image(&self, x: &Image) -> Result<EmbeddingVector> {
        Ok(self.embed_image_traced(x)?.0)
    }
}

/// Identity embedding used by the optional identity-preservation hook.
pub trait IdentityEmbedder: Send + Sync {
    fn embed_traced(&self, x: &Image) -> Result<(Array1<f64>, Box<dyn VectorPullback + '_>)>;

    fn embed(&self, x: &Image) -> Result<Array1<f64>> {
        Ok(self.embed_traced(x)?.0)
    }
}

/// Checks that `x` matches an extractor's fixed input size.
pub(crate) fn check_input_size(expected: Option<(usize, usize)>, x: &Image) -> Result<()> {
    if let Some(hw) = expected {
        if (x.height(), x.width()) != hw {
            return Err(Error::InvalidArgument(format!(
                "extractor expects {}x{} input, got {}x{}",
                hw.0,
                hw.1,
                x.height(),
                x.width()
            )));
        }
    }
    Ok(())
}

/// Resizes `x` to `target` if needed, returning the warp for the pullback.
pub fn fit_to(x: &Image, target: Option<(usize, usize)>) -> Result<(Image, Option<LinearWarp>)> {
    match target {
        Some(hw) if hw != (x.height(), x.width()) => {
            let warp = LinearWarp::resize((x.height(), x.width()), hw);
            Ok((warp.apply(x)?, Some(warp)))
        }
        _ => Ok((x.clone(), None)),
    }
}
