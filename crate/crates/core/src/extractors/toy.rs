//! Closed-form extractors for testing and for the synthetic-shapes backend.
//!
//! [`ToyPatchExtractor`] separates structure from colour analytically. Each
//! pixel is split into a luminance (channel mean) and a chroma vector (the
//! deviation from grey). Keys only see luminance and the chroma *magnitude*,
//! so recolouring a region by rotating its hue about the grey axis leaves the
//! keys unchanged, while the [CLS] vector is a soft colour histogram that
//! does change.

use ndarray::{Array1, Array2};

use super::{FeaturePullback, IdentityEmbedder, StructureSemanticExtractor, TextImageEmbedder, VectorPullback};
use crate::guidance::loss::{embed_ensemble, embed_ensemble_vjp};
use crate::guidance::{EmbeddingVector, FeatureBundle};
use crate::{Error, Image, Result};

/// Key layout: `[bias, lum − mean lum, chroma, ∂x lum, ∂y lum, ∂x chroma, ∂y chroma]`
/// where every entry except the bias is averaged over the patch.
pub const TOY_KEY_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPatchExtractor {
    pub patch: usize,
    pub bins: usize,
    pub bin_sigma: f64,
    pub key_bias: f64,
    pub chroma_eps: f64,
}

impl ToyPatchExtractor {
    pub fn new(patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        Ok(Self { patch, bins: 8, bin_sigma: 0.25, key_bias: 1.0, chroma_eps: 0.01 })
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        let w = 2.0 / self.bins as f64;
        (0..self.bins).map(|b| -1.0 + (b as f64 + 0.5) * w).collect()
    }

    fn kernel(&self, v: f64, center: f64) -> f64 {
        let d = v - center;
        (-d * d / (2.0 * self.bin_sigma * self.bin_sigma)).exp()
    }

    /// [CLS] vector of an all-zero image with `channels` channels: zero
    /// channel means followed by `exp(−b²/(2σ²))` for every bin centre `b`.
    pub fn zero_image_cls(&self, channels: usize) -> Array1<f64> {
        let mut v = vec![0.0; channels];
        for _ in 0..channels {
            v.extend(self.bin_centers().iter().map(|b| self.kernel(0.0, *b)));
        }
        Array1::from(v)
    }

    pub fn cls_dim(&self, channels: usize) -> usize {
        channels * (1 + self.bins)
    }

    fn grid(&self, x: &Image) -> Result<(usize, usize)> {
        let (h, w, c) = x.shape();
        if c == 0 || h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {h}x{w} is not divisible into {p}x{p} patches",
                p = self.patch
            )));
        }
        Ok((h / self.patch, w / self.patch))
    }

    /// Luminance, chroma-magnitude and smoothing denominator per pixel.
    fn pixel_stats(&self, x: &Image) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = x.channels();
        let n = x.height() * x.width();
        let mut lum = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        let eps2 = self.chroma_eps * self.chroma_eps;
        for px in x.as_slice().chunks_exact(c) {
            let l = px.iter().sum::<f64>() / c as f64;
            let ch2: f64 = px.iter().map(|v| (v - l) * (v - l)).sum();
            let root = (ch2 + eps2).sqrt();
            lum.push(l);
            q.push(root - self.chroma_eps);
            s.push(root);
        }
        (lum, q, s)
    }
}

/// Patch mean of forward differences along one axis; the last row/column has
/// no forward neighbour and contributes zero.
fn patch_diff_mean(field: &[f64], h: usize, w: usize, p: usize, pi: usize, pj: usize, horizontal: bool) -> f64 {
    let mut acc = 0.0;
    for i in pi * p..(pi + 1) * p {
        for j in pj * p..(pj + 1) * p {
            if horizontal && j + 1 < w {
                acc += field[i * w + j + 1] - field[i * w + j];
            } else if !horizontal && i + 1 < h {
                acc += field[(i + 1) * w + j] - field[i * w + j];
            }
        }
    }
    acc / (p * p) as f64
}

fn patch_diff_mean_adjoint(
    grad: &mut [f64],
    coef: f64,
    h: usize,
    w: usize,
    p: usize,
    pi: usize,
    pj: usize,
    horizontal: bool,
) {
    let a = coef / (p * p) as f64;
    for i in pi * p..(pi + 1) * p {
        for j in pj * p..(pj + 1) * p {
            if horizontal && j + 1 < w {
                grad[i * w + j + 1] += a;
                grad[i * w + j] -= a;
            } else if !horizontal && i + 1 < h {
                grad[(i + 1) * w + j] += a;
                grad[i * w + j] -= a;
            }
        }
    }
}

struct ToyPullback<'a> {
    ex: &'a ToyPatchExtractor,
    x: Image,
    lum: Vec<f64>,
    s: Vec<f64>,
}

impl FeaturePullback for ToyPullback<'_> {
    fn pullback(&self, d_keys: Option<&Array2<f64>>, d_cls: Option<&Array1<f64>>) -> Result<Image> {
        let (h, w, c) = self.x.shape();
        let p = self.ex.patch;
        let (gh, gw) = (h / p, w / p);
        let npx = h * w;
        let mut g_lum = vec![0.0; npx];
        let mut g_q = vec![0.0; npx];
        let mut out = Image::zeros(h, w, c);

        if let Some(dk) = d_keys {
            if dk.dim() != (gh * gw, TOY_KEY_DIM) {
                return Err(Error::shape((gh * gw, TOY_KEY_DIM), dk.dim()));
            }
            let area = (p * p) as f64;
            let mut g_mean_lum = 0.0;
            for pi in 0..gh {
                for pj in 0..gw {
                    let row = dk.row(pi * gw + pj);
                    g_mean_lum -= row[1];
                    for i in pi * p..(pi + 1) * p {
                        for j in pj * p..(pj + 1) * p {
                            g_lum[i * w + j] += row[1] / area;
                            g_q[i * w + j] += row[2] / area;
                        }
                    }
                    patch_diff_mean_adjoint(&mut g_lum, row[3], h, w, p, pi, pj, true);
                    patch_diff_mean_adjoint(&mut g_lum, row[4], h, w, p, pi, pj, false);
                    patch_diff_mean_adjoint(&mut g_q, row[5], h, w, p, pi, pj, true);
                    patch_diff_mean_adjoint(&mut g_q, row[6], h, w, p, pi, pj, false);
                }
            }
            let spread = g_mean_lum / npx as f64;
            g_lum.iter_mut().for_each(|g| *g += spread);
        }

        let xs = self.x.as_slice();
        let dst = out.as_slice_mut();
        for px in 0..npx {
            let l = self.lum[px];
            for k in 0..c {
                let chroma = xs[px * c + k] - l;
                dst[px * c + k] += g_lum[px] / c as f64 + g_q[px] * chroma / self.s[px];
            }
        }

        if let Some(dc) = d_cls {
            let bins = self.ex.bins;
            if dc.len() != self.ex.cls_dim(c) {
                return Err(Error::shape(self.ex.cls_dim(c), dc.len()));
            }
            let centers = self.ex.bin_centers();
            let sig2 = self.ex.bin_sigma * self.ex.bin_sigma;
            for px in 0..npx {
                for k in 0..c {
                    let v = xs[px * c + k];
                    let mut g = dc[k];
                    for (b, center) in centers.iter().enumerate() {
                        g += dc[c + k * bins + b] * self.ex.kernel(v, *center) * -(v - center) / sig2;
                    }
                    dst[px * c + k] += g / npx as f64;
                }
            }
        }
        Ok(out)
    }
}

impl StructureSemanticExtractor for ToyPatchExtractor {
    fn input_size(&self) -> Option<(usize, usize)> {
        None
    }

    fn extract_traced(&self, x: &Image) -> Result<(FeatureBundle, Box<dyn FeaturePullback + '_>)> {
        let (gh, gw) = self.grid(x)?;
        let (h, w, c) = x.shape();
        let p = self.patch;
        let (lum, q, s) = self.pixel_stats(x);
        let mean_lum = lum.iter().sum::<f64>() / lum.len() as f64;
        let area = (p * p) as f64;

        let mut keys = Array2::zeros((gh * gw, TOY_KEY_DIM));
        for pi in 0..gh {
            for pj in 0..gw {
                let mut sl = 0.0;
                let mut sq = 0.0;
                for i in pi * p..(pi + 1) * p {
                    for j in pj * p..(pj + 1) * p {
                        sl += lum[i * w + j];
                        sq += q[i * w + j];
                    }
                }
                let mut row = keys.row_mut(pi * gw + pj);
                row[0] = self.key_bias;
                row[1] = sl / area - mean_lum;
                row[2] = sq / area;
                row[3] = patch_diff_mean(&lum, h, w, p, pi, pj, true);
                row[4] = patch_diff_mean(&lum, h, w, p, pi, pj, false);
                row[5] = patch_diff_mean(&q, h, w, p, pi, pj, true);
                row[6] = patch_diff_mean(&q, h, w, p, pi, pj, false);
            }
        }

        let centers = self.bin_centers();
        let mut cls = vec![0.0; self.cls_dim(c)];
        for px in x.as_slice().chunks_exact(c) {
            for (k, v) in px.iter().enumerate() {
                cls[k] += v;
                for (b, center) in centers.iter().enumerate() {
                    cls[c + k * self.bins + b] += self.kernel(*v, *center);
                }
            }
        }
        let npx = (h * w) as f64;
        cls.iter_mut().for_each(|v| *v /= npx);

        let bundle = FeatureBundle::new(keys, Array1::from(cls))?;
        let pullback = ToyPullback { ex: self, x: x.clone(), lum, s };
        Ok((bundle, Box::new(pullback)))
    }
}

/// A named colour the toy text encoder understands.
#[derive(Debug, Clone, PartialEq)]
pub struct PaletteColor {
    pub name: &'static str,
    pub rgb: [f64; 3],
}

pub const TOY_PALETTE: &[PaletteColor] = &[
    PaletteColor { name: "red", rgb: [1.0, -1.0, -1.0] },
    PaletteColor { name: "green", rgb: [-1.0, 1.0, -1.0] },
    PaletteColor { name: "blue", rgb: [-1.0, -1.0, 1.0] },
    PaletteColor { name: "yellow", rgb: [1.0, 1.0, -1.0] },
    PaletteColor { name: "cyan", rgb: [-1.0, 1.0, 1.0] },
    PaletteColor { name: "magenta", rgb: [1.0, -1.0, 1.0] },
    PaletteColor { name: "orange", rgb: [1.0, 0.0, -1.0] },
    PaletteColor { name: "purple", rgb: [0.0, -1.0, 0.6] },
    PaletteColor { name: "white", rgb: [1.0, 1.0, 1.0] },
    PaletteColor { name: "black", rgb: [-1.0, -1.0, -1.0] },
    PaletteColor { name: "gray", rgb: [0.0, 0.0, 0.0] },
];

/// A two-member embedding ensemble over RGB images.
///
/// Member A sees the mean saturation-weighted chroma `s·c`, so grey pixels
/// contribute nothing and receive no gradient; member B sees the mean
/// luminance. Each has a constant leading entry so grey images still embed
/// to a non-zero vector. Text prompts embed as a solid swatch of the palette
/// colours they name.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEmbedder {
    pub chroma_bias: f64,
    pub lum_bias: f64,
    pub chroma_eps: f64,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self { chroma_bias: 0.05, lum_bias: 0.5, chroma_eps: 0.01 }
    }
}

impl ToyEmbedder {
    fn parts(&self, x: &Image) -> Result<Vec<Array1<f64>>> {
        if x.channels() != 3 {
            return Err(Error::InvalidArgument("toy embedder expects RGB images".into()));
        }
        let n = (x.height() * x.width()) as f64;
        let mut a = vec![self.chroma_bias, 0.0, 0.0, 0.0];
        for px in x.as_slice().chunks_exact(3) {
            let (c, s) = self.chroma(px);
            for k in 0..3 {
                a[k + 1] += s * c[k] / n;
            }
        }
        let lum = x.channel_means().iter().sum::<f64>() / 3.0;
        Ok(vec![Array1::from(a), Array1::from(vec![self.lum_bias, lum])])
    }

    /// Chroma vector and its smoothed magnitude.
    fn chroma(&self, px: &[f64]) -> ([f64; 3], f64) {
        let l = px.iter().sum::<f64>() / 3.0;
        let c = [px[0] - l, px[1] - l, px[2] - l];
        let s = (c.iter().map(|v| v * v).sum::<f64>() + self.chroma_eps * self.chroma_eps).sqrt();
        (c, s)
    }

    /// Palette colours mentioned in `prompt`, in order of appearance.
    pub fn colors_in(prompt: &str) -> Vec<&'static PaletteColor> {
        prompt
            .split(|ch: char| !ch.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .filter_map(|t| {
                let t = t.to_lowercase();
                let t = if t == "grey" { "gray".to_string() } else { t };
                TOY_PALETTE.iter().find(|p| p.name == t)
            })
            .collect()
    }

    pub fn swatch(rgb: [f64; 3], h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |_, _, k| rgb[k])
    }
}

struct EmbedPullback<'a> {
    emb: &'a ToyEmbedder,
    parts: Vec<Array1<f64>>,
    x: Image,
}

impl VectorPullback for EmbedPullback<'_> {
    fn pullback(&self, d: &Array1<f64>) -> Result<Image> {
        if d.len() != 6 {
            return Err(Error::shape(6, d.len()));
        }
        let g = embed_ensemble_vjp(&self.parts, d);
        let (h, w, c) = self.x.shape();
        let n = (h * w) as f64;
        let ga = [g[0][1] / n, g[0][2] / n, g[0][3] / n];
        let gb = g[1][1] / (3.0 * n);
        let mut out = self.x.clone();
        for px in out.as_slice_mut().chunks_exact_mut(c) {
            let (ch, s) = self.emb.chroma(px);
            // d(s·c)/dc = s·I + c·cᵀ/s, then project out the luminance
            let cg: f64 = ch.iter().zip(&ga).map(|(a, b)| a * b).sum::<f64>() / s;
            let dc: Vec<f64> = (0..3).map(|k| s * ga[k] + ch[k] * cg).collect();
            let mean = dc.iter().sum::<f64>() / 3.0;
            for k in 0..3 {
                px[k] = dc[k] - mean + gb;
            }
        }
        Ok(out)
    }
}

impl TextImageEmbedder for ToyEmbedder {
    fn input_size(&self) -> Option<(usize, usize)> {
        None
    }

    fn embed_dim(&self) -> usize {
        6
    }

    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVector> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let colors = Self::colors_in(prompt);
        if colors.is_empty() {
            let vocab: Vec<&str> = TOY_PALETTE.iter().map(|p| p.name).collect();
            return Err(Error::InvalidArgument(format!(
                "prompt {prompt:?} names no known colour (vocabulary: {})",
                vocab.join(", ")
            )));
        }
        let mut rgb = [0.0; 3];
        for col in &colors {
            for k in 0..3 {
                rgb[k] += col.rgb[k] / colors.len() as f64;
            }
        }
        self.embed_image(&Self::swatch(rgb, 1, 1))
    }

    fn embed_image_traced(&self, x: &Image) -> Result<(EmbeddingVector, Box<dyn VectorPullback + '_>)> {
        let parts = self.parts(x)?;
        let e = embed_ensemble(&parts)?;
        Ok((e, Box::new(EmbedPullback { emb: self, parts, x: x.clone() })))
    }
}

/// Identity embedding as average-pooled luminance.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyIdentityEmbedder {
    pub factor: usize,
}

struct PoolPullback {
    shape: (usize, usize, usize),
    factor: usize,
}

impl VectorPullback for PoolPullback {
    fn pullback(&self, d: &Array1<f64>) -> Result<Image> {
        let (h, w, c) = self.shape;
        let f = self.factor;
        let gw = w / f;
        if d.len() != (h / f) * gw {
            return Err(Error::shape((h / f) * gw, d.len()));
        }
        let scale = 1.0 / (f * f * c) as f64;
        Ok(Image::from_fn(h, w, c, |i, j, _| d[(i / f) * gw + j / f] * scale))
    }
}

impl IdentityEmbedder for ToyIdentityEmbedder {
    fn embed_traced(&self, x: &Image) -> Result<(Array1<f64>, Box<dyn VectorPullback + '_>)> {
        let (h, w, c) = x.shape();
        let f = self.factor;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::InvalidArgument(format!("image {h}x{w} not divisible by pool {f}")));
        }
        let (gh, gw) = (h / f, w / f);
        let mut v = Array1::zeros(gh * gw);
        for i in 0..h {
            for j in 0..w {
                let lum: f64 = (0..c).map(|k| x.get(i, j, k)).sum();
                v[(i / f) * gw + j / f] += lum;
            }
        }
        v /= (f * f * c) as f64;
        Ok((v, Box::new(PoolPullback { shape: x.shape(), factor: f })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{cosine, self_similarity};
    use crate::rng::NoiseStream;

    fn fd_extractor(ex: &ToyPatchExtractor, x: &Image, wk: &Array2<f64>, wc: &Array1<f64>) {
        let f = |img: &Image| {
            let b = ex.extract(img).unwrap();
            (&b.keys * wk).sum() + b.cls.dot(wc)
        };
        let (_, pb) = ex.extract_traced(x).unwrap();
        let g = pb.pullback(Some(wk), Some(wc)).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut()[i] += h;
            xm.as_slice_mut()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = g.as_slice()[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "pixel {i}: fd {fd} analytic {a}");
        }
    }

    #[test]
    fn shapes() {
        let ex = ToyPatchExtractor::new(1).unwrap();
        let b = ex.extract(&Image::zeros(2, 2, 1)).unwrap();
        assert_eq!(b.keys.dim(), (4, TOY_KEY_DIM));
        assert!(ToyPatchExtractor::new(3).unwrap().extract(&Image::zeros(4, 4, 3)).is_err());
    }

    #[test]
    fn zero_image_cls_constant() {
        let ex = ToyPatchExtractor::new(2).unwrap();
        let b = ex.extract(&Image::zeros(4, 4, 3)).unwrap();
        let expect = ex.zero_image_cls(3);
        assert!((b.cls - expect).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn constant_image_has_uniform_keys() {
        let ex = ToyPatchExtractor::new(2).unwrap();
        let b = ex.extract(&Image::filled(8, 8, 3, 0.4)).unwrap();
        let s = self_similarity(&b.keys).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn deterministic() {
        let ex = ToyPatchExtractor::new(2).unwrap();
        let x = NoiseStream::new(1).gaussian(8, 8, 3);
        assert_eq!(ex.extract(&x).unwrap(), ex.extract(&x).unwrap());
    }

    #[test]
    fn shift_permutes_key_rows() {
        // cyclic shift by one patch: interior patches keep their keys, moved by one column
        let ex = ToyPatchExtractor::new(2).unwrap();
        let x = Image::from_fn(8, 8, 3, |i, j, k| if (2..6).contains(&i) && (2..4).contains(&j) { [0.8, -0.6, -0.6][k] } else { 0.2 });
        let shifted = Image::from_fn(8, 8, 3, |i, j, k| x.get(i, (j + 8 - 2) % 8, k));
        let a = ex.extract(&x).unwrap().keys;
        let b = ex.extract(&shifted).unwrap().keys;
        for pi in 0..4 {
            for pj in 0..3 {
                let ra = a.row(pi * 4 + pj);
                let rb = b.row(pi * 4 + pj + 1);
                assert!(ra.iter().zip(rb.iter()).all(|(u, v)| (u - v).abs() < 1e-12), "patch ({pi},{pj})");
            }
        }
        // as sets of rows the two bundles agree
        let mut rows_a: Vec<Vec<i64>> = a.rows().into_iter().map(|r| r.iter().map(|v| (v * 1e9).round() as i64).collect()).collect();
        let mut rows_b: Vec<Vec<i64>> = b.rows().into_iter().map(|r| r.iter().map(|v| (v * 1e9).round() as i64).collect()).collect();
        rows_a.sort();
        rows_b.sort();
        assert_eq!(rows_a, rows_b);
    }

    #[test]
    fn hue_shift_keeps_structure_changes_cls() {
        let ex = ToyPatchExtractor::new(2).unwrap();
        let red = [0.8, -0.6, -0.6];
        // same luminance and chroma magnitude, different hue
        let blue = [-0.6, -0.6, 0.8];
        let paint = |col: [f64; 3]| {
            Image::from_fn(8, 8, 3, move |i, j, k| if i + j < 7 { col[k] } else { 0.2 })
        };
        let a = ex.extract(&paint(red)).unwrap();
        let b = ex.extract(&paint(blue)).unwrap();
        let sa = self_similarity(&a.keys).unwrap();
        let sb = self_similarity(&b.keys).unwrap();
        assert!((sa - sb).iter().all(|v| v.abs() < 1e-12));
        let dcls: f64 = (&a.cls - &b.cls).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dcls > 0.1);
    }

    #[test]
    fn extractor_gradient_matches_fd() {
        let ex = ToyPatchExtractor::new(2).unwrap();
        let mut rng = NoiseStream::new(3);
        let x = rng.gaussian(4, 6, 3).scale(0.5);
        let wk = Array2::from_shape_fn((6, TOY_KEY_DIM), |_| rng.normal());
        let wc = Array1::from_shape_fn(ex.cls_dim(3), |_| rng.normal());
        fd_extractor(&ex, &x, &wk, &wc);
    }

    #[test]
    fn embedder_vocabulary() {
        let emb = ToyEmbedder::default();
        assert_eq!(emb.embed_text("blue").unwrap(), emb.embed_text("blue").unwrap());
        assert!(emb.embed_text("").is_err());
        assert!(emb.embed_text("zebra").is_err());
        let x = NoiseStream::new(4).gaussian(4, 4, 3);
        let e = emb.embed_image(&x).unwrap();
        assert!((cosine(&e.v, &e.v).unwrap() - 1.0).abs() < 1e-12);

        for word in TOY_PALETTE {
            let text = emb.embed_text(word.name).unwrap();
            let matched = cosine(&text.v, &emb.embed_image(&ToyEmbedder::swatch(word.rgb, 4, 4)).unwrap().v).unwrap();
            for other in TOY_PALETTE.iter().filter(|o| o.name != word.name) {
                let img = emb.embed_image(&ToyEmbedder::swatch(other.rgb, 4, 4)).unwrap();
                let mismatched = cosine(&text.v, &img.v).unwrap();
                assert!(matched > mismatched, "{} vs {}", word.name, other.name);
            }
        }
    }

    #[test]
    fn embedder_gradient_matches_fd() {
        let emb = ToyEmbedder::default();
        let mut rng = NoiseStream::new(5);
        let x = rng.gaussian(3, 4, 3).scale(0.5);
        let d = Array1::from_shape_fn(emb.embed_dim(), |_| rng.normal());
        let (_, pb) = emb.embed_image_traced(&x).unwrap();
        let g = pb.pullback(&d).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut()[i] += h;
            xm.as_slice_mut()[i] -= h;
            let fd = (emb.embed_image(&xp).unwrap().v.dot(&d) - emb.embed_image(&xm).unwrap().v.dot(&d)) / (2.0 * h);
            assert!((fd - g.as_slice()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn identity_embedder() {
        let id = ToyIdentityEmbedder { factor: 2 };
        let mut rng = NoiseStream::new(6);
        let x = rng.gaussian(4, 4, 3);
        let v = id.embed(&x).unwrap();
        assert_eq!(v.len(), 4);
        let d = Array1::from_shape_fn(4, |_| rng.normal());
        let (_, pb) = id.embed_traced(&x).unwrap();
        let g = pb.pullback(&d).unwrap();
        // linear map: <E x, d> == <x, E^T d>
        assert!((v.dot(&d) - x.dot(&g).unwrap()).abs() < 1e-12);
        assert!(id.embed(&Image::zeros(3, 4, 3)).is_err());
    }
}
