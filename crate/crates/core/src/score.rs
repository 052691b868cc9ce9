//! Noise-prediction models.
//!
//! A [`ScoreModel`] maps a noisy image and its noise level to a prediction of
//! the injected noise, and exposes the vector-Jacobian product of that map so
//! guidance gradients can be pulled back through it.

use serde::{Deserialize, Serialize};

use crate::par::{self, Parallelism};
use crate::rng::NoiseStream;
use crate::schedule::NoiseLevel;
use crate::{Error, Image, Result};

pub trait ScoreModel: Send + Sync {
    /// `ε_θ(x_t, t)`.
    fn predict_eps(&self, x_t: &Image, level: NoiseLevel) -> Result<Image>;

    /// `(∂ε_θ/∂x_t)ᵀ · cotangent`.
    fn eps_vjp(&self, x_t: &Image, level: NoiseLevel, cotangent: &Image) -> Result<Image>;
}

impl<S: ScoreModel + ?Sized> ScoreModel for &S {
    fn predict_eps(&self, x_t: &Image, level: NoiseLevel) -> Result<Image> {
        (**self).predict_eps(x_t, level)
    }

    fn eps_vjp(&self, x_t: &Image, level: NoiseLevel, cotangent: &Image) -> Result<Image> {
        (**self).eps_vjp(x_t, level, cotangent)
    }
}

impl<S: ScoreModel + ?Sized> ScoreModel for Box<S> {
    fn predict_eps(&self, x_t: &Image, level: NoiseLevel) -> Result<Image> {
        (**self).predict_eps(x_t, level)
    }

    fn eps_vjp(&self, x_t: &Image, level: NoiseLevel, cotangent: &Image) -> Result<Image> {
        (**self).eps_vjp(x_t, level, cotangent)
    }
}

/// Exact noise predictor for data distributed as `N(mean, std²·I)`.
///
/// `ε*(x_t) = √(1−ᾱ)·(x_t − √ᾱ·mean) / (ᾱ·std² + 1 − ᾱ)`.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    pub mean: Image,
    pub std: f64,
}

impl GaussianScore {
    pub fn new(mean: Image, std: f64) -> Self {
        Self { mean, std }
    }

    fn gain(&self, ab: f64) -> f64 {
        (1.0 - ab).sqrt() / (ab * self.std * self.std + 1.0 - ab)
    }

    /// Posterior mean `E[x0 | x_t]`, computed directly rather than through
    /// the noise prediction.
    pub fn posterior_x0(&self, x_t: &Image, ab: f64) -> Result<Image> {
        let v = self.std * self.std;
        let k = ab.sqrt() * v / (ab * v + 1.0 - ab);
        let centred = x_t.axpby(1.0, &self.mean, -ab.sqrt())?;
        self.mean.axpby(1.0, &centred, k)
    }
}

impl ScoreModel for GaussianScore {
    fn predict_eps(&self, x_t: &Image, level: NoiseLevel) -> Result<Image> {
        let ab = level.alpha_bar;
        let g = self.gain(ab);
        x_t.axpby(g, &self.mean, -g * ab.sqrt())
    }

    fn eps_vjp(&self, x_t: &Image, level: NoiseLevel, cotangent: &Image) -> Result<Image> {
        x_t.ensure_same_shape(cotangent)?;
        Ok(cotangent.scale(self.gain(level.alpha_bar)))
    }
}

/// One isotropic Gaussian component of a per-pixel colour mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: f64,
}

/// A score model whose prior treats every pixel as an independent draw from
/// a Gaussian mixture over colours. The optimal denoiser for that prior is
/// available in closed form, which makes the model cheap to fit, exact to
/// differentiate, and small enough to ship as a JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelMixtureScore {
    pub components: Vec<ColorComponent>,
    #[serde(skip, default)]
    pub parallelism: Parallelism,
}

/// Per-pixel quantities shared by the forward and pullback passes.
struct PixelPosterior {
    resp: Vec<f64>,
    /// component-conditional posterior means, `K×C` row-major
    cond_means: Vec<f64>,
    /// `∂ log N_k / ∂y`, `K×C` row-major
    score_terms: Vec<f64>,
    shrink: Vec<f64>,
}

impl PixelMixtureScore {
    pub fn new(components: Vec<ColorComponent>) -> Result<Self> {
        let model = Self { components, parallelism: Parallelism::default() };
        model.validate()?;
        Ok(model)
    }

    pub fn with_parallelism(mut self, policy: Parallelism) -> Self {
        self.parallelism = policy;
        self
    }

    pub fn channels(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.components.is_empty() || c == 0 {
            return Err(Error::Checkpoint("mixture has no components".into()));
        }
        for comp in &self.components {
            if comp.mean.len() != c {
                return Err(Error::Checkpoint("component channel counts differ".into()));
            }
            if !(comp.weight > 0.0 && comp.var > 0.0 && comp.weight.is_finite() && comp.var.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "component weight/variance must be positive, got {}/{}",
                    comp.weight, comp.var
                )));
            }
        }
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let model: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Fits the mixture to the pixels of `images` by expectation-maximisation.
    pub fn fit(images: &[Image], components: usize, iterations: usize, seed: u64) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("no training images".into()))?;
        let c = first.channels();
        if components == 0 {
            return Err(Error::InvalidArgument("need at least one component".into()));
        }
        let mut pixels: Vec<&[f64]> = Vec::new();
        for img in images {
            if img.channels() != c {
                return Err(Error::shape(c, img.channels()));
            }
            pixels.extend(img.as_slice().chunks_exact(c));
        }
        let n = pixels.len();
        if n < components {
            return Err(Error::InvalidArgument("fewer pixels than components".into()));
        }

        // k-means++ style seeding
        let mut rng = NoiseStream::new(seed);
        let mut means: Vec<Vec<f64>> = vec![pixels[rng.below(n)].to_vec()];
        while means.len() < components {
            let d2: Vec<f64> = pixels
                .iter()
                .map(|p| means.iter().map(|m| sq_dist(p, m)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d2.iter().sum();
            let mut pick = rng.uniform() * total;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if pick < *d {
                    idx = i;
                    break;
                }
                pick -= d;
            }
            means.push(pixels[idx].to_vec());
        }
        let mut weights = vec![1.0 / components as f64; components];
        let mut vars = vec![0.05; components];
        let floor = 1e-4;

        let mut resp = vec![0.0; n * components];
        for _ in 0..iterations {
            for (i, p) in pixels.iter().enumerate() {
                let row = &mut resp[i * components..(i + 1) * components];
                for k in 0..components {
                    row[k] = weights[k].ln() - 0.5 * c as f64 * (2.0 * std::f64::consts::PI * vars[k]).ln()
                        - sq_dist(p, &means[k]) / (2.0 * vars[k]);
                }
                softmax_in_place(row);
            }
            for k in 0..components {
                let nk: f64 = (0..n).map(|i| resp[i * components + k]).sum();
                if nk < 1e-9 {
                    continue;
                }
                let mut m = vec![0.0; c];
                for (i, p) in pixels.iter().enumerate() {
                    let r = resp[i * components + k];
                    for (mc, pc) in m.iter_mut().zip(p.iter()) {
                        *mc += r * pc;
                    }
                }
                m.iter_mut().for_each(|v| *v /= nk);
                let ss: f64 = pixels
                    .iter()
                    .enumerate()
                    .map(|(i, p)| resp[i * components + k] * sq_dist(p, &m))
                    .sum();
                vars[k] = (ss / (nk * c as f64)).max(floor);
                means[k] = m;
                weights[k] = nk / n as f64;
            }
        }
        let components = weights
            .into_iter()
            .zip(means)
            .zip(vars)
            .filter(|((w, _), _)| *w > 1e-9)
            .map(|((weight, mean), var)| ColorComponent { weight, mean, var })
            .collect();
        Self::new(components)
    }

    fn posterior(&self, y: &[f64], ab: f64) -> PixelPosterior {
        let c = y.len();
        let k = self.components.len();
        let sab = ab.sqrt();
        let mut resp = vec![0.0; k];
        let mut cond_means = vec![0.0; k * c];
        let mut score_terms = vec![0.0; k * c];
        let mut shrink = vec![0.0; k];
        for (j, comp) in self.components.iter().enumerate() {
            let s2 = ab * comp.var + 1.0 - ab;
            let mut d2 = 0.0;
            for ch in 0..c {
                let d = y[ch] - sab * comp.mean[ch];
                d2 += d * d;
                score_terms[j * c + ch] = -d / s2;
            }
            resp[j] = comp.weight.ln() - 0.5 * c as f64 * s2.ln() - d2 / (2.0 * s2);
            shrink[j] = sab * comp.var / s2;
            for ch in 0..c {
                cond_means[j * c + ch] = comp.mean[ch] + shrink[j] * (y[ch] - sab * comp.mean[ch]);
            }
        }
        softmax_in_place(&mut resp);
        PixelPosterior { resp, cond_means, score_terms, shrink }
    }

    /// Posterior mean `E[x0 | x_t]` under the mixture prior.
    pub fn posterior_x0(&self, x_t: &Image, ab: f64) -> Result<Image> {
        let c = self.check_channels(x_t)?;
        let mut out = x_t.clone();
        par::for_each_chunk_mut(self.parallelism, out.as_slice_mut(), c * 64, |_, chunk| {
            for px in chunk.chunks_exact_mut(c) {
                let post = self.posterior(px, ab);
                for ch in 0..c {
                    px[ch] = (0..post.resp.len()).map(|j| post.resp[j] * post.cond_means[j * c + ch]).sum();
                }
            }
        });
        Ok(out)
    }

    /// `(∂E[x0|x_t]/∂x_t)ᵀ · cotangent`.
    pub fn posterior_x0_vjp(&self, x_t: &Image, ab: f64, cotangent: &Image) -> Result<Image> {
        let c = self.check_channels(x_t)?;
        x_t.ensure_same_shape(cotangent)?;
        let mut out = cotangent.clone();
        let y_all = x_t.as_slice();
        par::for_each_chunk_mut(self.parallelism, out.as_slice_mut(), c * 64, |chunk_idx, chunk| {
            let base = chunk_idx * c * 64;
            for (p, g) in chunk.chunks_exact_mut(c).enumerate() {
                let start = base + p * c;
                let y = &y_all[start..start + c];
                let post = self.posterior(y, ab);
                let k = post.resp.len();
                let mut mean_score = vec![0.0; c];
                for j in 0..k {
                    for ch in 0..c {
                        mean_score[ch] += post.resp[j] * post.score_terms[j * c + ch];
                    }
                }
                let diag: f64 = (0..k).map(|j| post.resp[j] * post.shrink[j]).sum();
                let mut acc: Vec<f64> = g.iter().map(|v| diag * v).collect();
                for j in 0..k {
                    let gm: f64 = (0..c).map(|ch| g[ch] * post.cond_means[j * c + ch]).sum();
                    for ch in 0..c {
                        acc[ch] += gm * post.resp[j] * (post.score_terms[j * c + ch] - mean_score[ch]);
                    }
                }
                g.copy_from_slice(&acc);
            }
        });
        Ok(out)
    }

    fn check_channels(&self, x: &Image) -> Result<usize> {
        let c = self.channels();
        if x.channels() != c {
            return Err(Error::shape(c, x.channels()));
        }
        Ok(c)
    }
}

impl ScoreModel for PixelMixtureScore {
    fn predict_eps(&self, x_t: &Image, level: NoiseLevel) -> Result<Image> {
        let ab = level.alpha_bar;
        let x0 = self.posterior_x0(x_t, ab)?;
        x_t.axpby(1.0 / (1.0 - ab).sqrt(), &x0, -ab.sqrt() / (1.0 - ab).sqrt())
    }

    fn eps_vjp(&self, x_t: &Image, level: NoiseLevel, cotangent: &Image) -> Result<Image> {
        let ab = level.alpha_bar;
        let pulled = self.posterior_x0_vjp(x_t, ab, cotangent)?;
        cotangent.axpby(1.0 / (1.0 - ab).sqrt(), &pulled, -ab.sqrt() / (1.0 - ab).sqrt())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(model: &dyn ScoreModel, x: &Image, level: NoiseLevel, cot: &Image) {
        let analytic = model.eps_vjp(x, level, cot).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut()[i] += h;
            xm.as_slice_mut()[i] -= h;
            let fp = model.predict_eps(&xp, level).unwrap().dot(cot).unwrap();
            let fm = model.predict_eps(&xm, level).unwrap().dot(cot).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice()[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "index {i}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn gaussian_vjp_matches_fd() {
        let mut rng = NoiseStream::new(1);
        let model = GaussianScore::new(rng.gaussian(3, 3, 2).scale(0.3), 0.4);
        let x = rng.gaussian(3, 3, 2);
        let cot = rng.gaussian(3, 3, 2);
        fd_check(&model, &x, NoiseLevel { t: 10, alpha_bar: 0.3 }, &cot);
    }

    #[test]
    fn gaussian_standard_normal_case() {
        let model = GaussianScore::new(Image::zeros(2, 2, 1), 1.0);
        let x = Image::from_fn(2, 2, 1, |i, j, _| i as f64 - 0.5 * j as f64);
        let ab = 0.36;
        let eps = model.predict_eps(&x, NoiseLevel { t: 1, alpha_bar: ab }).unwrap();
        for (e, v) in eps.as_slice().iter().zip(x.as_slice()) {
            assert!((e - 0.8 * v).abs() < 1e-12);
        }
    }

    fn three_colours() -> PixelMixtureScore {
        PixelMixtureScore::new(vec![
            ColorComponent { weight: 0.6, mean: vec![0.2, 0.2, 0.2], var: 0.01 },
            ColorComponent { weight: 0.2, mean: vec![0.8, -0.8, -0.8], var: 0.02 },
            ColorComponent { weight: 0.2, mean: vec![-0.8, -0.8, 0.8], var: 0.015 },
        ])
        .unwrap()
    }

    #[test]
    fn mixture_vjp_matches_fd() {
        let model = three_colours();
        let mut rng = NoiseStream::new(4);
        let x = rng.gaussian(3, 2, 3);
        let cot = rng.gaussian(3, 2, 3);
        for ab in [0.02, 0.3, 0.9] {
            fd_check(&model, &x, NoiseLevel { t: 1, alpha_bar: ab }, &cot);
        }
    }

    #[test]
    fn mixture_policies_agree() {
        let model = three_colours();
        let mut rng = NoiseStream::new(6);
        let x = rng.gaussian(16, 16, 3);
        let cot = rng.gaussian(16, 16, 3);
        let lvl = NoiseLevel { t: 1, alpha_bar: 0.4 };
        let seq = model.clone().with_parallelism(Parallelism::Sequential);
        let par = model.with_parallelism(Parallelism::Parallel);
        assert_eq!(seq.predict_eps(&x, lvl).unwrap(), par.predict_eps(&x, lvl).unwrap());
        assert_eq!(seq.eps_vjp(&x, lvl, &cot).unwrap(), par.eps_vjp(&x, lvl, &cot).unwrap());
    }

    #[test]
    fn fit_recovers_clusters() {
        let mut rng = NoiseStream::new(8);
        let colours = [[0.2, 0.2, 0.2], [0.8, -0.8, -0.8], [-0.8, -0.8, 0.8]];
        let images: Vec<Image> = (0..6)
            .map(|n| {
                Image::from_fn(8, 8, 3, |i, j, k| {
                    let which = if n % 2 == 0 { (i + j) % 3 } else { (i * j) % 3 };
                    colours[which][k]
                })
                .axpby(1.0, &rng.gaussian(8, 8, 3), 0.05)
                .unwrap()
            })
            .collect();
        let model = PixelMixtureScore::fit(&images, 3, 30, 1).unwrap();
        assert_eq!(model.components.len(), 3);
        for col in colours {
            let best = model
                .components
                .iter()
                .map(|c| sq_dist(&c.mean, &col))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-3, "no component near {col:?}");
        }
        for c in &model.components {
            assert!((c.var - 0.0025).abs() < 1e-3, "var {}", c.var);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = three_colours();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save_json(&path).unwrap();
        assert_eq!(PixelMixtureScore::load_json(&path).unwrap().components, model.components);
        std::fs::write(&path, "{\"components\": []}").unwrap();
        assert!(PixelMixtureScore::load_json(&path).is_err());
    }
}
