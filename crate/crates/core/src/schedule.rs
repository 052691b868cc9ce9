//! Diffusion process arithmetic.
//!
//! Timesteps are 1-based throughout: `t = 1` is the least noisy step and
//! `t = len()` the noisiest. `alpha_bar(0)` is defined as 1.

use serde::{Deserialize, Serialize};

use crate::{Error, Image, Result};

/// How the reverse-step noise scale is derived from the betas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceRule {
    /// `σ_t² = β_t`.
    #[default]
    Beta,
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    Posterior,
}

/// Precomputed per-timestep tables.
///
/// A schedule built by [`NoiseSchedule::respaced`] additionally remembers
/// which timestep of its parent each of its steps corresponds to, so a score
/// model trained on the parent can be queried at the right noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    base_timesteps: Vec<usize>,
    rule: VarianceRule,
}

/// A noise level as seen by a score model: the timestep in the model's own
/// training schedule and the cumulative signal rate at that step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub t: usize,
    pub alpha_bar: f64,
}

/// The output of one noise prediction together with its Tweedie estimate.
#[derive(Debug, Clone)]
pub struct DenoisePrediction {
    pub t: usize,
    pub eps: Image,
    pub x0_hat: Image,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_min` at `t = 1` to `beta_max` at `t = T`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64, rule: VarianceRule) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + i as f64 / (steps - 1) as f64 * (beta_max - beta_min)
                }
            })
            .collect();
        Self::from_betas(betas, rule)
    }

    /// The default pixel-space schedule: linear, 1000 steps, `β ∈ [1e-4, 0.02]`.
    pub fn standard(rule: VarianceRule) -> Self {
        Self::linear(1000, 1e-4, 0.02, rule).expect("standard schedule is valid")
    }

    /// Builds a schedule from explicit betas. Betas must lie in `(0, 1)` and be
    /// non-decreasing.
    pub fn from_betas(betas: Vec<f64>, rule: VarianceRule) -> Result<Self> {
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidSchedule("betas must be non-decreasing".into()));
        }
        let base = (1..=betas.len()).collect();
        Self::with_base(betas, base, rule)
    }

    fn with_base(betas: Vec<f64>, base_timesteps: Vec<usize>, rule: VarianceRule) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..betas.len())
            .map(|i| {
                if i == 0 {
                    // terminal step is noiseless
                    return 0.0;
                }
                let var = match rule {
                    VarianceRule::Beta => betas[i],
                    VarianceRule::Posterior => {
                        betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i])
                    }
                };
                var.sqrt()
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars, sigmas, base_timesteps, rule })
    }

    /// A strided sub-schedule of `steps` evenly spaced timesteps, with betas
    /// recomputed so that the cumulative products match the parent exactly at
    /// the retained timesteps.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        let total = self.len();
        if steps < 1 || steps > total {
            return Err(Error::InvalidSchedule(format!(
                "cannot respace {total} steps into {steps}"
            )));
        }
        let picks: Vec<usize> = if steps == 1 {
            vec![total]
        } else {
            let stride = (total - 1) as f64 / (steps - 1) as f64;
            (0..steps).map(|i| (i as f64 * stride).round() as usize + 1).collect()
        };
        let mut betas = Vec::with_capacity(steps);
        let mut last = 1.0;
        for &t in &picks {
            let ab = self.alpha_bars[t - 1];
            betas.push(1.0 - ab / last);
            last = ab;
        }
        let base = picks.iter().map(|&t| self.base_timesteps[t - 1]).collect();
        Self::with_base(betas, base, self.rule)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn rule(&self) -> VarianceRule {
        self.rule
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepOutOfRange { t, len: self.len() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.index(t)?])
    }

    /// The noise level a score model should be queried at for step `t`.
    pub fn level(&self, t: usize) -> Result<NoiseLevel> {
        let i = self.index(t)?;
        Ok(NoiseLevel { t: self.base_timesteps[i], alpha_bar: self.alpha_bars[i] })
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
    pub fn q_sample(&self, x0: &Image, t: usize, eps: &Image) -> Result<Image> {
        let ab = self.alpha_bars[self.index(t)?];
        x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// `x_t/√ᾱ_t − √(1−ᾱ_t)/√ᾱ_t · eps_pred`.
    pub fn tweedie_x0(&self, x_t: &Image, t: usize, eps_pred: &Image) -> Result<Image> {
        let ab = self.alpha_bars[self.index(t)?];
        let s = ab.sqrt();
        x_t.axpby(1.0 / s, eps_pred, -(1.0 - ab).sqrt() / s)
    }

    /// Inverse of [`Self::tweedie_x0`]: the noise implied by a clean estimate.
    pub fn eps_from_x0(&self, x_t: &Image, t: usize, x0: &Image) -> Result<Image> {
        let ab = self.alpha_bars[self.index(t)?];
        x_t.axpby(1.0 / (1.0 - ab).sqrt(), x0, -ab.sqrt() / (1.0 - ab).sqrt())
    }

    /// Reverse-process mean `(x_t − (1−α_t)/√(1−ᾱ_t)·eps) / √α_t`.
    pub fn posterior_mean(&self, x_t: &Image, t: usize, eps_pred: &Image) -> Result<Image> {
        let a = self.alpha(t)?;
        let ab = self.alpha_bar(t)?;
        let inv = 1.0 / a.sqrt();
        let coef = if a == 1.0 { 0.0 } else { (1.0 - a) / (1.0 - ab).sqrt() };
        x_t.axpby(inv, eps_pred, -inv * coef)
    }

    /// `posterior_mean + σ_t·noise`.
    pub fn reverse_step(
        &self,
        x_t: &Image,
        t: usize,
        eps_pred: &Image,
        noise: &Image,
    ) -> Result<Image> {
        x_t.ensure_same_shape(noise)?;
        let mut mean = self.posterior_mean(x_t, t, eps_pred)?;
        let sigma = self.sigma(t)?;
        if sigma != 0.0 {
            mean.add_scaled(sigma, noise)?;
        }
        Ok(mean)
    }

    /// One forward transition `t−1 → t`: `√(1−β_t)·x + √β_t·noise`.
    pub fn forward_step(&self, x_prev: &Image, t: usize, noise: &Image) -> Result<Image> {
        let b = self.beta(t)?;
        x_prev.axpby((1.0 - b).sqrt(), noise, b.sqrt())
    }

    pub fn predict(&self, x_t: &Image, t: usize, eps: Image) -> Result<DenoisePrediction> {
        let x0_hat = self.tweedie_x0(x_t, t, &eps)?;
        Ok(DenoisePrediction { t, eps, x0_hat })
    }
}

/// Manifold-constrained correction: subtract the loss gradient taken with
/// respect to `x_t` from the unguided reverse sample.
pub fn mcg_correct(x_prime: &Image, grad: &Image) -> Result<Image> {
    x_prime.sub(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseStream;
    use approx::assert_relative_eq;

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1, VarianceRule::Beta).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert_relative_eq!(s.alpha_bars()[0], 0.9);
        assert_eq!(s.sigma(1).unwrap(), 0.0);
    }

    #[test]
    fn constant_half() {
        let s = NoiseSchedule::linear(3, 0.5, 0.5, VarianceRule::Beta).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25, 0.125]);
    }

    #[test]
    fn standard_product_matches_brute_force() {
        let s = NoiseSchedule::standard(VarianceRule::Beta);
        let mut prod = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        assert_relative_eq!(s.alpha_bar(1000).unwrap(), prod, max_relative = 1e-10);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        for (a, b) in s.alphas().iter().zip(s.betas()) {
            assert_eq!(*a, 1.0 - b);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2, VarianceRule::Beta).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1, VarianceRule::Beta).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.1, VarianceRule::Beta).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0, VarianceRule::Beta).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1], VarianceRule::Beta).is_err());
    }

    #[test]
    fn variance_rules() {
        let beta = NoiseSchedule::linear(10, 0.01, 0.1, VarianceRule::Beta).unwrap();
        let post = NoiseSchedule::linear(10, 0.01, 0.1, VarianceRule::Posterior).unwrap();
        for t in 2..=10 {
            assert_relative_eq!(beta.sigma(t).unwrap().powi(2), beta.beta(t).unwrap(), max_relative = 1e-12);
            let expect = post.beta(t).unwrap() * (1.0 - post.alpha_bar(t - 1).unwrap())
                / (1.0 - post.alpha_bar(t).unwrap());
            assert_relative_eq!(post.sigma(t).unwrap().powi(2), expect, max_relative = 1e-12);
        }
        assert_eq!(beta.sigma(1).unwrap(), 0.0);
        assert_eq!(post.sigma(1).unwrap(), 0.0);
    }

    #[test]
    fn respacing_keeps_alpha_bars() {
        let base = NoiseSchedule::standard(VarianceRule::Beta);
        let sub = base.respaced(100).unwrap();
        assert_eq!(sub.len(), 100);
        assert_eq!(sub.level(1).unwrap().t, 1);
        assert_eq!(sub.level(100).unwrap().t, 1000);
        for t in 1..=100 {
            let lvl = sub.level(t).unwrap();
            assert_relative_eq!(
                sub.alpha_bar(t).unwrap(),
                base.alpha_bar(lvl.t).unwrap(),
                max_relative = 1e-12
            );
        }
        // respacing a respaced schedule maps back to the root timesteps
        let subsub = sub.respaced(10).unwrap();
        assert_eq!(subsub.level(10).unwrap().t, 1000);
        assert!(base.respaced(0).is_err());
        assert!(base.respaced(1001).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = NoiseSchedule::linear(3, 0.5, 0.5, VarianceRule::Beta).unwrap();
        let x0 = Image::from_fn(2, 2, 1, |i, j, _| (i + 2 * j) as f64 * 0.3 - 0.4);
        let zero = Image::zeros(2, 2, 1);
        let out = s.q_sample(&x0, 2, &zero).unwrap();
        assert_eq!(out, x0.scale(0.5));

        let ones = Image::filled(2, 2, 1, 1.0);
        let out = s.q_sample(&zero, 2, &ones).unwrap();
        for v in out.as_slice() {
            assert_relative_eq!(*v, 0.75f64.sqrt(), max_relative = 1e-12);
        }
        assert!(s.q_sample(&x0, 0, &zero).is_err());
        assert!(s.q_sample(&x0, 4, &zero).is_err());
        assert!(s.q_sample(&x0, 1, &Image::zeros(1, 2, 1)).is_err());
    }

    #[test]
    fn tweedie_inverts_q_sample() {
        let s = NoiseSchedule::standard(VarianceRule::Beta);
        let mut rng = NoiseStream::new(3);
        let x0 = rng.gaussian(4, 4, 3);
        let eps = rng.gaussian(4, 4, 3);
        for t in [1, 10, 250, 500, 999, 1000] {
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let back = s.tweedie_x0(&xt, t, &eps).unwrap();
            for (a, b) in back.as_slice().iter().zip(x0.as_slice()) {
                assert!((a - b).abs() <= 1e-6, "t={t}: {a} vs {b}");
            }
            let e = s.eps_from_x0(&xt, t, &x0).unwrap();
            for (a, b) in e.as_slice().iter().zip(eps.as_slice()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn tweedie_zero_eps_and_gaussian_posterior() {
        let s = NoiseSchedule::standard(VarianceRule::Beta);
        let mut rng = NoiseStream::new(11);
        let xt = rng.gaussian(3, 3, 1);
        let t = 400;
        let ab = s.alpha_bar(t).unwrap();
        let out = s.tweedie_x0(&xt, t, &Image::zeros(3, 3, 1)).unwrap();
        for (a, b) in out.as_slice().iter().zip(xt.as_slice()) {
            assert_relative_eq!(*a, b / ab.sqrt(), max_relative = 1e-12);
        }
        // x0 ~ N(0, I): optimal eps is sqrt(1-ab) x_t and E[x0|x_t] = sqrt(ab) x_t
        let eps_star = xt.scale((1.0 - ab).sqrt());
        let out = s.tweedie_x0(&xt, t, &eps_star).unwrap();
        for (a, b) in out.as_slice().iter().zip(xt.as_slice()) {
            assert_relative_eq!(*a, ab.sqrt() * b, max_relative = 1e-10);
        }
    }

    #[test]
    fn posterior_mean_cases() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05, VarianceRule::Beta).unwrap();
        let mut rng = NoiseStream::new(5);
        let xt = rng.gaussian(4, 4, 1);
        let eps = rng.gaussian(4, 4, 1);
        let t = 30;
        let a = s.alpha(t).unwrap();
        let out = s.posterior_mean(&xt, t, &Image::zeros(4, 4, 1)).unwrap();
        for (o, x) in out.as_slice().iter().zip(xt.as_slice()) {
            assert_relative_eq!(*o, x / a.sqrt(), max_relative = 1e-12);
        }
        // duplicate-formula oracle, written elementwise from scratch
        let out = s.posterior_mean(&xt, t, &eps).unwrap();
        let ab: f64 = s.alphas()[..t].iter().product();
        for i in 0..16 {
            let (x, e) = (xt.as_slice()[i], eps.as_slice()[i]);
            let expect = (x - (1.0 - a) / (1.0 - ab).sqrt() * e) / a.sqrt();
            assert!((out.as_slice()[i] - expect).abs() <= 1e-10);
        }
    }

    #[test]
    fn identity_step_when_beta_vanishes() {
        let s = NoiseSchedule::from_betas(vec![1e-300, 0.5], VarianceRule::Beta).unwrap();
        let x = Image::from_fn(2, 2, 1, |i, j, _| i as f64 - j as f64);
        let eps = Image::filled(2, 2, 1, 0.7);
        assert_eq!(s.posterior_mean(&x, 1, &eps).unwrap(), x);
    }

    #[test]
    fn reverse_step_without_noise_is_mean() {
        let s = NoiseSchedule::standard(VarianceRule::Beta);
        let mut rng = NoiseStream::new(9);
        let xt = rng.gaussian(3, 3, 3);
        let eps = rng.gaussian(3, 3, 3);
        let zero = Image::zeros(3, 3, 3);
        assert_eq!(
            s.reverse_step(&xt, 500, &eps, &zero).unwrap(),
            s.posterior_mean(&xt, 500, &eps).unwrap()
        );
        // t = 1 ignores noise entirely
        let noise = rng.gaussian(3, 3, 3);
        assert_eq!(
            s.reverse_step(&xt, 1, &eps, &noise).unwrap(),
            s.posterior_mean(&xt, 1, &eps).unwrap()
        );
    }

    #[test]
    fn reverse_step_variance_monte_carlo() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.05, VarianceRule::Beta).unwrap();
        let t = 60;
        let xt = Image::filled(1, 1, 1, 0.3);
        let eps = Image::filled(1, 1, 1, -0.2);
        let mut rng = NoiseStream::new(21);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| s.reverse_step(&xt, t, &eps, &rng.gaussian(1, 1, 1)).unwrap().as_slice()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sigma2 = s.sigma(t).unwrap().powi(2);
        assert!((var / sigma2 - 1.0).abs() < 0.05, "var {var} vs {sigma2}");
    }

    #[test]
    fn mcg_cases() {
        let mut rng = NoiseStream::new(2);
        let x = rng.gaussian(2, 3, 3);
        assert_eq!(mcg_correct(&x, &Image::zeros(2, 3, 3)).unwrap(), x);
        assert!(mcg_correct(&x, &x).unwrap().as_slice().iter().all(|v| *v == 0.0));
        assert!(mcg_correct(&x, &Image::zeros(3, 2, 3)).is_err());
    }
}
