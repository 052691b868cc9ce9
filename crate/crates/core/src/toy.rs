//! Synthetic two-domain shapes: the data, the score model fitted to it and
//! the structure/style measures used to judge a translation.
//!
//! Every image is a single filled shape on a grey background. The domain is
//! the fill colour and the structure is the shape mask. The two domain
//! colours share luminance and chroma magnitude, so they differ only by a
//! hue rotation.

use ndarray::Array1;

use crate::extractors::StructureSemanticExtractor;
use crate::rng::NoiseStream;
use crate::score::PixelMixtureScore;
use crate::{Error, Image, Result};

pub const TOY_SIZE: usize = 32;
pub const BACKGROUND: [f64; 3] = [0.2, 0.2, 0.2];
/// Fill colours of domain 0 ("red") and domain 1 ("blue").
pub const DOMAIN_COLORS: [[f64; 3]; 2] = [[0.8, -0.6, -0.6], [-0.6, -0.6, 0.8]];
pub const DOMAIN_NAMES: [&str; 2] = ["red", "blue"];
/// Chroma magnitude above which a pixel counts as foreground.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

impl ShapeSpec {
    pub fn random(rng: &mut NoiseStream, size: usize) -> Self {
        let kind = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle][rng.below(3)];
        let mid = size as f64 / 2.0;
        let jitter = size as f64 * 0.15;
        Self {
            kind,
            cy: mid + rng.uniform_in(-jitter, jitter),
            cx: mid + rng.uniform_in(-jitter, jitter),
            radius: rng.uniform_in(0.2, 0.32) * size as f64,
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let y = i as f64 + 0.5 - self.cy;
        let x = j as f64 + 0.5 - self.cx;
        let r = self.radius;
        match self.kind {
            ShapeKind::Disc => x * x + y * y <= r * r,
            ShapeKind::Square => x.abs() <= r * 0.85 && y.abs() <= r * 0.85,
            // apex up, base at y = r/2
            ShapeKind::Triangle => y >= -r && y <= r * 0.5 && x.abs() <= (y + r) * 0.577,
        }
    }

    pub fn mask(&self, size: usize) -> Vec<bool> {
        (0..size * size).map(|p| self.contains(p / size, p % size)).collect()
    }

    pub fn render(&self, size: usize, domain: usize, texture: f64, rng: &mut NoiseStream) -> Image {
        let fill = DOMAIN_COLORS[domain];
        let mut img = Image::zeros(size, size, 3);
        for i in 0..size {
            for j in 0..size {
                let base = if self.contains(i, j) { fill } else { BACKGROUND };
                for k in 0..3 {
                    img.set(i, j, k, base[k] + texture * rng.normal());
                }
            }
        }
        img
    }
}

/// A labelled set of toy images.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub images: Vec<Image>,
    pub domains: Vec<usize>,
    pub shapes: Vec<ShapeSpec>,
}

impl ToyDataset {
    /// `per_domain` images of each domain with independent random shapes.
    pub fn generate(per_domain: usize, texture: f64, seed: u64) -> Self {
        let mut rng = NoiseStream::new(seed);
        let mut out = Self { images: Vec::new(), domains: Vec::new(), shapes: Vec::new() };
        for domain in 0..2 {
            for _ in 0..per_domain {
                let shape = ShapeSpec::random(&mut rng, TOY_SIZE);
                out.images.push(shape.render(TOY_SIZE, domain, texture, &mut rng));
                out.domains.push(domain);
                out.shapes.push(shape);
            }
        }
        out
    }

    pub fn of_domain(&self, domain: usize) -> Vec<&Image> {
        self.images.iter().zip(&self.domains).filter(|(_, d)| **d == domain).map(|(x, _)| x).collect()
    }
}

/// Fits the pixel-mixture score model to a dataset: one component per
/// colour present in the data.
pub fn train_score_model(data: &ToyDataset, seed: u64) -> Result<PixelMixtureScore> {
    PixelMixtureScore::fit(&data.images, 3, 30, seed)
}

/// Foreground mask by chroma magnitude.
pub fn shape_mask(x: &Image) -> Vec<bool> {
    let c = x.channels();
    x.as_slice()
        .chunks_exact(c)
        .map(|px| {
            let l = px.iter().sum::<f64>() / c as f64;
            px.iter().map(|v| (v - l) * (v - l)).sum::<f64>().sqrt() > MASK_THRESHOLD
        })
        .collect()
}

/// Intersection over union of two masks; two empty masks score 1.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean [CLS] vector over a set of images.
pub fn cls_centroid(extractor: &dyn StructureSemanticExtractor, images: &[&Image]) -> Result<Array1<f64>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("centroid of an empty set".into()));
    }
    let mut acc: Option<Array1<f64>> = None;
    for x in images {
        let cls = extractor.extract(x)?.cls;
        acc = Some(match acc {
            Some(a) => a + cls,
            None => cls,
        });
    }
    Ok(acc.expect("non-empty") / images.len() as f64)
}
