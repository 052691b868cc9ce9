//! The differentiable total loss on a denoised estimate.

use ndarray::{Array1, Array2};

use super::loss::{clip_loss, contrastive_loss, directional_target, range_loss, semantic_divergence, ssim_loss, style_loss};
use super::{l2, total_loss, FeatureBundle, GuidanceWeights, LossTerms, Mode};
use crate::extractors::{fit_to, sample_views, AugmentConfig, IdentityEmbedder, StructureSemanticExtractor, TextImageEmbedder};
use crate::extractors::warp::LinearWarp;
use crate::par::Parallelism;
use crate::{Error, Image, Result};

/// What to translate and towards what.
#[derive(Debug, Clone)]
pub struct GuidanceTask {
    pub mode: Mode,
    pub source: Image,
    pub target_text: Option<String>,
    pub source_text: Option<String>,
    pub target_image: Option<Image>,
}

impl GuidanceTask {
    pub fn text(source: Image, target_text: impl Into<String>, source_text: impl Into<String>) -> Self {
        Self {
            mode: Mode::Text,
            source,
            target_text: Some(target_text.into()),
            source_text: Some(source_text.into()),
            target_image: None,
        }
    }

    pub fn image(source: Image, target_image: Image) -> Self {
        Self { mode: Mode::Image, source, target_text: None, source_text: None, target_image: Some(target_image) }
    }
}

/// Loss value, per-term breakdown and image-space gradient for one estimate.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub terms: LossTerms,
    pub total: f64,
    /// gradient of the weighted total with respect to the denoised estimate
    pub grad: Image,
    /// [CLS] token of the estimate, carried to the next step
    pub cls: Array1<f64>,
}

/// Anything the sampler can differentiate on the denoised estimate.
pub trait GuidanceLoss: Sync {
    /// Evaluates the loss at `x0`. `prev_cls` is the previous step's
    /// [CLS] token, `aug_seed` selects any random augmentations.
    fn evaluate(&self, x0: &Image, prev_cls: Option<&Array1<f64>>, aug_seed: u64) -> Result<Evaluation>;
}

impl GuidanceLoss for Objective<'_> {
    fn evaluate(&self, x0: &Image, prev_cls: Option<&Array1<f64>>, aug_seed: u64) -> Result<Evaluation> {
        Objective::evaluate(self, x0, prev_cls, aug_seed)
    }
}

enum StyleTarget {
    Text(Array1<f64>),
    Image { cls: Array1<f64>, pixels: Image },
}

/// Precomputes everything that depends only on the task, then evaluates
/// the weighted total loss and its gradient on denoised estimates.
pub struct Objective<'a> {
    extractor: &'a dyn StructureSemanticExtractor,
    embedder: Option<&'a dyn TextImageEmbedder>,
    identity: Option<&'a dyn IdentityEmbedder>,
    weights: GuidanceWeights,
    augment: AugmentConfig,
    views: usize,
    parallelism: Parallelism,
    source: Image,
    source_bundle: FeatureBundle,
    style: StyleTarget,
    source_identity: Option<Array1<f64>>,
}

impl<'a> Objective<'a> {
    pub fn new(
        task: &GuidanceTask,
        weights: GuidanceWeights,
        extractor: &'a dyn StructureSemanticExtractor,
        embedder: Option<&'a dyn TextImageEmbedder>,
        identity: Option<&'a dyn IdentityEmbedder>,
    ) -> Result<Self> {
        weights.validate()?;
        let source = task.source.clone();
        if !source.is_finite() {
            return Err(Error::NonFinite("source image".into()));
        }
        let (src_in, _) = fit_to(&source, extractor.input_size())?;
        let source_bundle = extractor.extract(&src_in)?;

        let style = match task.mode {
            Mode::Text => {
                let emb = embedder.ok_or(Error::MissingModeInput { mode: "text", what: "text-image embedder" })?;
                let trg = task
                    .target_text
                    .as_deref()
                    .ok_or(Error::MissingModeInput { mode: "text", what: "target text" })?;
                let trg = emb.embed_text(trg)?;
                let target = if weights.global_clip {
                    trg.v.clone()
                } else {
                    let src_text = task
                        .source_text
                        .as_deref()
                        .ok_or(Error::MissingModeInput { mode: "text", what: "source text" })?;
                    let src_text = emb.embed_text(src_text)?;
                    let (src_e, _) = fit_to(&source, emb.input_size())?;
                    let src_img = emb.embed_image(&src_e)?;
                    directional_target(&trg, &src_img, &src_text, weights.lambda_s, weights.lambda_i)?
                };
                StyleTarget::Text(target)
            }
            Mode::Image => {
                let target = task
                    .target_image
                    .as_ref()
                    .ok_or(Error::MissingModeInput { mode: "image", what: "target image" })?;
                if target.channels() != source.channels() {
                    return Err(Error::shape(source.channels(), target.channels()));
                }
                let (pixels, _) = fit_to(target, Some((source.height(), source.width())))?;
                let (trg_in, _) = fit_to(&pixels, extractor.input_size())?;
                let cls = extractor.extract(&trg_in)?.cls;
                StyleTarget::Image { cls, pixels }
            }
        };

        let source_identity = match identity {
            Some(id) if weights.lambda_id > 0.0 => Some(id.embed(&source)?),
            _ => None,
        };

        Ok(Self {
            extractor,
            embedder,
            identity,
            weights,
            augment: AugmentConfig::default(),
            views: 8,
            parallelism: Parallelism::default(),
            source,
            source_bundle,
            style,
            source_identity,
        })
    }

    pub fn with_augment(mut self, cfg: AugmentConfig, views: usize) -> Result<Self> {
        cfg.validate()?;
        if views == 0 {
            return Err(Error::InvalidArgument("need at least one augmented view".into()));
        }
        self.augment = cfg;
        self.views = views;
        Ok(self)
    }

    pub fn with_parallelism(mut self, policy: Parallelism) -> Self {
        self.parallelism = policy;
        self
    }

    pub fn weights(&self) -> &GuidanceWeights {
        &self.weights
    }

    pub fn mode(&self) -> Mode {
        match self.style {
            StyleTarget::Text(_) => Mode::Text,
            StyleTarget::Image { .. } => Mode::Image,
        }
    }

    pub fn source(&self) -> &Image {
        &self.source
    }

    pub fn source_bundle(&self) -> &FeatureBundle {
        &self.source_bundle
    }

    /// [CLS] token of an image under the configured extractor.
    pub fn cls_of(&self, x: &Image) -> Result<Array1<f64>> {
        let (xe, _) = fit_to(x, self.extractor.input_size())?;
        Ok(self.extractor.extract(&xe)?.cls)
    }

    /// Evaluates the weighted total loss at the denoised estimate `x0`.
    ///
    /// `prev_cls` is the [CLS] token of the previous step's estimate; without
    /// it the semantic divergence term is skipped. `aug_seed` selects the
    /// augmentations for the CLIP term.
    pub fn evaluate(&self, x0: &Image, prev_cls: Option<&Array1<f64>>, aug_seed: u64) -> Result<Evaluation> {
        x0.ensure_same_shape(&self.source)?;
        if !x0.is_finite() {
            return Err(Error::NonFinite("denoised estimate".into()));
        }
        let w = &self.weights;
        let mut terms = LossTerms::default();
        let (h, wd, c) = x0.shape();
        let mut grad = Image::zeros(h, wd, c);

        let (x_in, resize) = fit_to(x0, self.extractor.input_size())?;
        let (bundle, pullback) = self.extractor.extract_traced(&x_in)?;

        let mut g_keys: Option<Array2<f64>> = None;
        let mut add_keys = |g: Array2<f64>, scale: f64| {
            let g = g * scale;
            g_keys = Some(match g_keys.take() {
                Some(acc) => acc + g,
                None => g,
            });
        };
        if w.lambda_cont > 0.0 {
            let r = contrastive_loss(&self.source_bundle.keys, &bundle.keys, w.tau, self.parallelism)?;
            terms.cont = r.value;
            add_keys(r.grad, w.lambda_cont);
        }
        if w.lambda_ssim > 0.0 {
            let r = ssim_loss(&self.source_bundle.keys, &bundle.keys, self.parallelism)?;
            terms.ssim = r.value;
            add_keys(r.grad, w.lambda_ssim);
        }

        let mut g_cls: Option<Array1<f64>> = None;
        if let (StyleTarget::Image { cls, pixels }, true) = (&self.style, w.lambda_style > 0.0) {
            let r = style_loss(cls, &bundle.cls, pixels, x0, w.lambda_mse)?;
            terms.style = r.value;
            g_cls = Some(r.grad_cls * w.lambda_style);
            grad.add_scaled(w.lambda_style, &r.grad_image)?;
        }
        if let (Some(prev), true) = (prev_cls, w.lambda_sem > 0.0) {
            let r = semantic_divergence(&bundle.cls, prev)?;
            terms.sem = r.value;
            let g = r.grad * w.lambda_sem;
            g_cls = Some(match g_cls.take() {
                Some(acc) => acc + g,
                None => g,
            });
        }

        if g_keys.is_some() || g_cls.is_some() {
            let g_in = pullback.pullback(g_keys.as_ref(), g_cls.as_ref())?;
            let g_native = match &resize {
                Some(warp) => warp.adjoint(&g_in)?,
                None => g_in,
            };
            grad.add_scaled(1.0, &g_native)?;
        }

        if let (StyleTarget::Text(target), true) = (&self.style, w.lambda_style > 0.0) {
            let (value, g) = self.clip_term(x0, target, aug_seed)?;
            terms.style = value;
            grad.add_scaled(w.lambda_style, &g)?;
        }

        let rng = range_loss(x0);
        terms.rng = rng.value;
        if w.lambda_rng > 0.0 {
            grad.add_scaled(w.lambda_rng, &rng.grad)?;
        }

        if let (Some(id), Some(src_id), true) = (self.identity, &self.source_identity, w.lambda_id > 0.0) {
            let (e, pb) = id.embed_traced(x0)?;
            let d = &e - src_id;
            let n = l2(&d);
            terms.id = n;
            if n > 0.0 {
                grad.add_scaled(w.lambda_id, &pb.pullback(&(d / n))?)?;
            }
        }

        let total = total_loss(&terms, w);
        if !total.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite(format!("guidance loss/gradient (terms {terms:?})")));
        }
        Ok(Evaluation { terms, total, grad, cls: bundle.cls })
    }

    /// Directional CLIP loss averaged over augmented views, with its gradient
    /// in native image space.
    fn clip_term(&self, x0: &Image, target: &Array1<f64>, aug_seed: u64) -> Result<(f64, Image)> {
        let emb = self.embedder.ok_or(Error::MissingModeInput { mode: "text", what: "text-image embedder" })?;
        let views = sample_views(x0.shape(), self.views, aug_seed, &self.augment)?;
        let mut traced = Vec::with_capacity(views.len());
        let mut embeddings = Vec::with_capacity(views.len());
        for v in &views {
            let xv = v.apply(x0)?;
            let (xe, resize) = fit_to(&xv, emb.input_size())?;
            let (e, pb) = emb.embed_image_traced(&xe)?;
            embeddings.push(e.v);
            traced.push((pb, resize));
        }
        let r = clip_loss(&embeddings, target)?;
        let (h, w, c) = x0.shape();
        let mut grad = Image::zeros(h, w, c);
        for ((view, (pb, resize)), g) in views.iter().zip(traced).zip(r.grad.iter()) {
            let g_in = pb.pullback(g)?;
            let g_view = match resize {
                Some(warp) => LinearWarp::adjoint(&warp, &g_in)?,
                None => g_in,
            };
            grad.add_scaled(1.0, &view.adjoint(&g_view)?)?;
        }
        Ok((r.value, grad))
    }
}
