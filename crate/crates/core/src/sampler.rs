//! The guided reverse loop: skip-start initialisation, resampling at the
//! start step, MCG-corrected reverse steps and the restart trick.

use std::io::Write;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::extractors::{AugmentConfig, IdentityEmbedder};
use crate::guidance::{l2, GuidanceLoss, LossTerms, Mode};
use crate::par::{self, Parallelism};
use crate::rng::{derive_seed, NoiseStream};
use crate::schedule::{mcg_correct, NoiseSchedule, VarianceRule};
use crate::score::ScoreModel;
use crate::{Error, Image, Result};

const TAG_START: u64 = 1;
const TAG_STEPS: u64 = 2;
const TAG_AUGMENT: u64 = 3;
const TAG_RESTART: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mode: Mode,
    /// length of the training schedule the score model was fitted on
    pub train_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub variance_rule: VarianceRule,
    /// length of the strided sampling schedule
    pub schedule_steps: usize,
    /// steps skipped at the noisy end; sampling starts at `schedule_steps − skip`
    pub skip: usize,
    pub resample: usize,
    pub restart_enabled: bool,
    pub restart_threshold: f64,
    pub max_restarts: usize,
    /// augmented views for the CLIP term
    pub views: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// keep a denoised snapshot every this many steps; 0 keeps none
    pub snapshot_every: usize,
    /// differentiate through the score model; otherwise treat ε as constant
    pub full_gradient: bool,
    /// keep the sample after every step
    pub keep_states: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::text_defaults()
    }
}

impl SamplerConfig {
    pub fn text_defaults() -> Self {
        Self {
            mode: Mode::Text,
            train_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            variance_rule: VarianceRule::Beta,
            schedule_steps: 100,
            skip: 40,
            resample: 10,
            restart_enabled: false,
            restart_threshold: 0.01,
            max_restarts: 5,
            views: 8,
            augment: AugmentConfig::default(),
            seed: 0,
            snapshot_every: 10,
            full_gradient: true,
            keep_states: false,
        }
    }

    pub fn image_defaults() -> Self {
        Self { mode: Mode::Image, schedule_steps: 200, skip: 80, ..Self::text_defaults() }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Text => Self::text_defaults(),
            Mode::Image => Self::image_defaults(),
        }
    }

    pub fn t_start(&self) -> usize {
        self.schedule_steps.saturating_sub(self.skip)
    }

    /// Number of guided steps a run performs.
    pub fn guided_steps(&self) -> usize {
        self.t_start() + self.resample
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule_steps == 0 || self.schedule_steps > self.train_steps {
            return Err(Error::InvalidArgument(format!(
                "schedule_steps must be in 1..={}, got {}",
                self.train_steps, self.schedule_steps
            )));
        }
        if self.t_start() == 0 {
            return Err(Error::InvalidArgument(format!(
                "skip {} leaves no steps of a {}-step schedule",
                self.skip, self.schedule_steps
            )));
        }
        if !(self.restart_threshold > 0.0) {
            return Err(Error::InvalidArgument("restart_threshold must be positive".into()));
        }
        if self.views == 0 {
            return Err(Error::InvalidArgument("views must be at least 1".into()));
        }
        self.augment.validate()
    }

    /// The strided sampling schedule.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_steps, self.beta_min, self.beta_max, self.variance_rule)?
            .respaced(self.schedule_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Resample,
    Reverse,
}

/// One guided step as written to the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub attempt: usize,
    pub phase: Phase,
    /// timestep in the sampling schedule
    pub t: usize,
    /// timestep in the score model's training schedule
    pub model_t: usize,
    pub terms: LossTerms,
    pub total: f64,
    /// norm of the correction applied to the reverse sample
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub index: usize,
    pub t: usize,
    pub x0_hat: Image,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    /// guided steps of the final attempt
    pub steps: Vec<StepRecord>,
    /// steps of abandoned attempts, kept for diagnosis
    pub discarded: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
    /// sample after every step, when requested
    pub states: Vec<Image>,
    pub restarts: usize,
}

impl TrajectoryRecord {
    /// Writes one JSON object per step.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for s in self.discarded.iter().chain(&self.steps) {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn last_terms(&self) -> Option<&LossTerms> {
        self.steps.last().map(|s| &s.terms)
    }
}

#[derive(Debug, Clone)]
pub struct Translation {
    /// final sample, clamped to `[-1, 1]`
    pub image: Image,
    pub record: TrajectoryRecord,
    /// seed of the attempt that produced the output
    pub seed: u64,
}

/// Result of a single guided step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub x: Image,
    pub x0_hat: Image,
    pub cls: Array1<f64>,
    pub terms: LossTerms,
    pub total: f64,
    pub grad_norm: f64,
}

/// Forward-diffuses the source to `t_start` with fresh noise.
pub fn init_start(x_src: &Image, schedule: &NoiseSchedule, t_start: usize, seed: u64) -> Result<Image> {
    let eps = NoiseStream::derived(seed, TAG_START).gaussian_like(x_src);
    schedule.q_sample(x_src, t_start, &eps)
}

/// Chains an image-space gradient on the Tweedie estimate back to `x_t`.
pub fn tweedie_pullback(
    schedule: &NoiseSchedule,
    score: &dyn ScoreModel,
    x_t: &Image,
    t: usize,
    g_x0: &Image,
    full_gradient: bool,
) -> Result<Image> {
    let level = schedule.level(t)?;
    let ab = level.alpha_bar;
    let inv = 1.0 / ab.sqrt();
    if !full_gradient {
        return Ok(g_x0.scale(inv));
    }
    let through_eps = score.eps_vjp(x_t, level, g_x0)?;
    g_x0.axpby(inv, &through_eps, -(1.0 - ab).sqrt() * inv)
}

/// One reverse step from `x_t` with the loss gradient subtracted.
#[allow(clippy::too_many_arguments)]
pub fn guided_step(
    x_t: &Image,
    t: usize,
    schedule: &NoiseSchedule,
    score: &dyn ScoreModel,
    loss: Option<&dyn GuidanceLoss>,
    prev_cls: Option<&Array1<f64>>,
    noise: &Image,
    aug_seed: u64,
    full_gradient: bool,
) -> Result<StepOutput> {
    let level = schedule.level(t)?;
    let eps = score.predict_eps(x_t, level)?;
    let x0_hat = schedule.tweedie_x0(x_t, t, &eps)?;
    let x_prime = schedule.reverse_step(x_t, t, &eps, noise)?;
    let Some(loss) = loss else {
        return Ok(StepOutput {
            x: x_prime,
            x0_hat,
            cls: Array1::zeros(0),
            terms: LossTerms::default(),
            total: 0.0,
            grad_norm: 0.0,
        });
    };
    let ev = loss.evaluate(&x0_hat, prev_cls, aug_seed)?;
    let grad = tweedie_pullback(schedule, score, x_t, t, &ev.grad, full_gradient)?;
    if !ev.total.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite(format!("guidance at t={t}: terms {:?}", ev.terms)));
    }
    let x = mcg_correct(&x_prime, &grad)?;
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("sample after step t={t}")));
    }
    Ok(StepOutput { x, x0_hat, cls: ev.cls, terms: ev.terms, total: ev.total, grad_norm: grad.norm() })
}

/// State threaded through the steps of one attempt.
struct Walk<'a> {
    schedule: &'a NoiseSchedule,
    score: &'a dyn ScoreModel,
    loss: Option<&'a dyn GuidanceLoss>,
    cfg: &'a SamplerConfig,
    noise: NoiseStream,
    seed: u64,
    attempt: usize,
    prev_cls: Option<Array1<f64>>,
    record: TrajectoryRecord,
}

impl Walk<'_> {
    fn step(&mut self, x: &Image, t: usize, phase: Phase) -> Result<StepOutput> {
        let index = self.record.steps.len();
        let noise = self.noise.gaussian_like(x);
        let aug_seed = derive_seed(derive_seed(self.seed, TAG_AUGMENT), index as u64);
        let out = guided_step(
            x,
            t,
            self.schedule,
            self.score,
            self.loss,
            self.prev_cls.as_ref(),
            &noise,
            aug_seed,
            self.cfg.full_gradient,
        )?;
        if !out.cls.is_empty() {
            self.prev_cls = Some(out.cls.clone());
        }
        self.record.steps.push(StepRecord {
            index,
            attempt: self.attempt,
            phase,
            t,
            model_t: self.schedule.level(t)?.t,
            terms: out.terms.clone(),
            total: out.total,
            grad_norm: out.grad_norm,
        });
        if self.cfg.snapshot_every > 0 && index % self.cfg.snapshot_every == 0 {
            self.record.snapshots.push(Snapshot { index, t, x0_hat: out.x0_hat.clone() });
        }
        if self.cfg.keep_states {
            self.record.states.push(out.x.clone());
        }
        Ok(out)
    }
}

/// Repeats a guided step to `t_start − 1` followed by a forward step back to
/// `t_start`, `cfg.resample` times.
fn resample_walk(walk: &mut Walk<'_>, x_start: &Image, t_start: usize) -> Result<Image> {
    let mut x = x_start.clone();
    for _ in 0..walk.cfg.resample {
        let out = walk.step(&x, t_start, Phase::Resample)?;
        let noise = walk.noise.gaussian_like(&out.x);
        x = walk.schedule.forward_step(&out.x, t_start, &noise)?;
    }
    Ok(x)
}

/// Applies the resampling strategy at the start step and returns the new
/// sample at `cfg.t_start()`.
pub fn resample_at_start(
    x_start: &Image,
    schedule: &NoiseSchedule,
    score: &dyn ScoreModel,
    loss: Option<&dyn GuidanceLoss>,
    cfg: &SamplerConfig,
) -> Result<(Image, TrajectoryRecord)> {
    let mut walk = Walk {
        schedule,
        score,
        loss,
        cfg,
        noise: NoiseStream::derived(cfg.seed, TAG_STEPS),
        seed: cfg.seed,
        attempt: 0,
        prev_cls: None,
        record: TrajectoryRecord::default(),
    };
    let x = resample_walk(&mut walk, x_start, cfg.t_start())?;
    Ok((x, walk.record))
}

/// Runs the complete translation from `x_src`.
///
/// With `loss = None` this is plain DDPM sampling from the skip-start point,
/// drawing exactly the same noise as a guided run with the same seed.
pub fn run_translation(
    x_src: &Image,
    cfg: &SamplerConfig,
    score: &dyn ScoreModel,
    loss: Option<&dyn GuidanceLoss>,
) -> Result<Translation> {
    cfg.validate()?;
    if !x_src.is_finite() {
        return Err(Error::NonFinite("source image".into()));
    }
    let schedule = cfg.schedule()?;
    let t_start = cfg.t_start();
    let mut discarded = Vec::new();
    let mut attempt = 0;
    loop {
        let seed = if attempt == 0 { cfg.seed } else { derive_seed(derive_seed(cfg.seed, TAG_RESTART), attempt as u64) };
        let mut walk = Walk {
            schedule: &schedule,
            score,
            loss,
            cfg,
            noise: NoiseStream::derived(seed, TAG_STEPS),
            seed,
            attempt,
            prev_cls: None,
            record: TrajectoryRecord::default(),
        };
        let x_start = init_start(x_src, &schedule, t_start, seed)?;
        let mut x = resample_walk(&mut walk, &x_start, t_start)?;
        let mut restart = needs_restart(cfg, &walk.record);
        if !restart {
            for t in (1..=t_start).rev() {
                x = walk.step(&x, t, Phase::Reverse)?.x;
                if t == t_start && needs_restart(cfg, &walk.record) {
                    restart = true;
                    break;
                }
            }
        }
        if restart {
            if attempt >= cfg.max_restarts {
                return Err(Error::RestartsExhausted(attempt));
            }
            discarded.append(&mut walk.record.steps);
            attempt += 1;
            continue;
        }
        let mut record = walk.record;
        record.discarded = discarded;
        record.restarts = attempt;
        return Ok(Translation { image: x.clamp(-1.0, 1.0), record, seed });
    }
}

/// The range loss of the first guided step decides whether to restart.
fn needs_restart(cfg: &SamplerConfig, record: &TrajectoryRecord) -> bool {
    cfg.restart_enabled
        && record.steps.first().is_some_and(|s| s.terms.rng > cfg.restart_threshold)
}

/// Runs one translation per seed, in parallel when the policy allows.
pub fn run_batch(
    x_src: &Image,
    cfg: &SamplerConfig,
    seeds: &[u64],
    score: &dyn ScoreModel,
    loss: Option<&dyn GuidanceLoss>,
    policy: Parallelism,
) -> Vec<Result<Translation>> {
    par::map_slice(policy, seeds, |&seed| {
        let cfg = SamplerConfig { seed, ..cfg.clone() };
        run_translation(x_src, &cfg, score, loss)
    })
}

/// `λ_id · ‖E_id(x̂_0) − E_id(x_src)‖`, or 0 without a registered embedder.
pub fn identity_hook(
    x0_hat: &Image,
    x_src: &Image,
    lambda_id: f64,
    embedder: Option<&dyn IdentityEmbedder>,
) -> Result<f64> {
    match embedder {
        Some(e) if lambda_id != 0.0 => Ok(lambda_id * l2(&(e.embed(x0_hat)? - e.embed(x_src)?))),
        _ => Ok(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractors::ToyIdentityEmbedder;
    use crate::guidance::Evaluation;
    use crate::score::GaussianScore;

    fn small_cfg() -> SamplerConfig {
        SamplerConfig { schedule_steps: 20, skip: 8, resample: 3, snapshot_every: 0, ..SamplerConfig::text_defaults() }
    }

    struct Quadratic {
        target: Image,
    }

    impl GuidanceLoss for Quadratic {
        fn evaluate(&self, x0: &Image, _: Option<&Array1<f64>>, _: u64) -> Result<Evaluation> {
            let d = x0.sub(&self.target)?;
            Ok(Evaluation {
                terms: LossTerms { rng: crate::guidance::l_rng(x0), ..LossTerms::default() },
                total: 0.5 * d.dot(&d)?,
                grad: d,
                cls: Array1::zeros(0),
            })
        }
    }

    struct RangeOnly(f64);

    impl GuidanceLoss for RangeOnly {
        fn evaluate(&self, x0: &Image, _: Option<&Array1<f64>>, _: u64) -> Result<Evaluation> {
            let (h, w, c) = x0.shape();
            Ok(Evaluation {
                terms: LossTerms { rng: self.0, ..LossTerms::default() },
                total: 0.0,
                grad: Image::zeros(h, w, c),
                cls: Array1::zeros(0),
            })
        }
    }

    #[test]
    fn defaults_and_step_accounting() {
        let text = SamplerConfig::text_defaults();
        assert_eq!((text.t_start(), text.guided_steps()), (60, 70));
        let image = SamplerConfig::image_defaults();
        assert_eq!((image.t_start(), image.guided_steps()), (120, 130));
        assert!(SamplerConfig { skip: 100, ..text.clone() }.validate().is_err());
        assert!(SamplerConfig { restart_threshold: 0.0, ..text }.validate().is_err());
    }

    #[test]
    fn init_start_zero_noise_limit_and_reproducible() {
        let s = NoiseSchedule::from_betas(vec![1e-300, 0.5], VarianceRule::Beta).unwrap();
        let x = Image::from_fn(4, 4, 3, |i, j, k| (i + j + k) as f64 / 10.0 - 0.5);
        assert_eq!(init_start(&x, &s, 1, 3).unwrap(), x);
        assert_eq!(init_start(&x, &s, 2, 3).unwrap(), init_start(&x, &s, 2, 3).unwrap());
        assert!(init_start(&x, &s, 3, 3).is_err());
    }

    #[test]
    fn tweedie_pullback_matches_finite_differences() {
        let s = NoiseSchedule::standard(VarianceRule::Beta).respaced(50).unwrap();
        let mut rng = NoiseStream::new(11);
        let model = GaussianScore::new(rng.gaussian(4, 4, 2).scale(0.3), 0.4);
        let c = rng.gaussian(4, 4, 2);
        let x_t = rng.gaussian(4, 4, 2);
        let t = 30;
        let loss = |x: &Image| {
            let eps = model.predict_eps(x, s.level(t).unwrap()).unwrap();
            let d = s.tweedie_x0(x, t, &eps).unwrap().sub(&c).unwrap();
            0.5 * d.dot(&d).unwrap()
        };
        let eps = model.predict_eps(&x_t, s.level(t).unwrap()).unwrap();
        let g0 = s.tweedie_x0(&x_t, t, &eps).unwrap().sub(&c).unwrap();
        let g = tweedie_pullback(&s, &model, &x_t, t, &g0, true).unwrap();
        let h = 1e-5;
        for idx in 0..x_t.len() {
            let mut p = x_t.clone();
            let mut m = x_t.clone();
            p.as_slice_mut()[idx] += h;
            m.as_slice_mut()[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = g.as_slice()[idx];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-8), "{idx}: {fd} vs {an}");
        }
        let stop = tweedie_pullback(&s, &model, &x_t, t, &g0, false).unwrap();
        assert_eq!(stop, g0.scale(1.0 / s.alpha_bar(t).unwrap().sqrt()));
    }

    #[test]
    fn zero_guidance_is_unguided() {
        let cfg = SamplerConfig { keep_states: true, ..small_cfg() };
        let model = GaussianScore::new(Image::filled(6, 6, 3, 0.2), 0.3);
        let src = Image::from_fn(6, 6, 3, |i, j, _| if i < j { 0.5 } else { -0.5 });
        let zero = Quadratic { target: src.clone() };
        struct Zero<'a>(&'a Quadratic);
        impl GuidanceLoss for Zero<'_> {
            fn evaluate(&self, x0: &Image, p: Option<&Array1<f64>>, s: u64) -> Result<Evaluation> {
                let mut e = self.0.evaluate(x0, p, s)?;
                e.grad = e.grad.scale(0.0);
                e.total = 0.0;
                Ok(e)
            }
        }
        let guided = run_translation(&src, &cfg, &model, Some(&Zero(&zero))).unwrap();
        let plain = run_translation(&src, &cfg, &model, None).unwrap();
        assert_eq!(guided.record.states.len(), cfg.guided_steps());
        assert_eq!(guided.record.states, plain.record.states);
        assert_eq!(guided.image, plain.image);
    }

    #[test]
    fn resample_zero_is_identity() {
        let cfg = SamplerConfig { resample: 0, ..small_cfg() };
        let s = cfg.schedule().unwrap();
        let model = GaussianScore::new(Image::zeros(3, 3, 1), 1.0);
        let x = NoiseStream::new(1).gaussian(3, 3, 1);
        let (out, rec) = resample_at_start(&x, &s, &model, None, &cfg).unwrap();
        assert_eq!(out, x);
        assert!(rec.steps.is_empty());
        let cfg = SamplerConfig { resample: 4, ..cfg };
        let (_, rec) = resample_at_start(&x, &s, &model, None, &cfg).unwrap();
        assert_eq!(rec.steps.len(), 4);
        assert!(rec.steps.iter().all(|r| r.phase == Phase::Resample && r.t == cfg.t_start()));
    }

    #[test]
    fn deterministic_and_clamped() {
        let cfg = small_cfg();
        let model = GaussianScore::new(Image::filled(5, 5, 3, 0.9), 0.5);
        let src = Image::filled(5, 5, 3, -0.2);
        let q = Quadratic { target: Image::filled(5, 5, 3, 0.4) };
        let a = run_translation(&src, &cfg, &model, Some(&q)).unwrap();
        let b = run_translation(&src, &cfg, &model, Some(&q)).unwrap();
        assert_eq!(a.image, b.image);
        assert!(a.image.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.record.steps.len(), cfg.guided_steps());
        let c = run_translation(&src, &SamplerConfig { seed: 1, ..cfg }, &model, Some(&q)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn restart_logic() {
        let model = GaussianScore::new(Image::zeros(4, 4, 1), 0.5);
        let src = Image::zeros(4, 4, 1);
        let cfg = SamplerConfig { restart_enabled: true, restart_threshold: f64::INFINITY, ..small_cfg() };
        let out = run_translation(&src, &cfg, &model, Some(&RangeOnly(1e9))).unwrap();
        assert_eq!(out.record.restarts, 0);

        let cfg = SamplerConfig { restart_threshold: 0.01, max_restarts: 2, ..cfg };
        assert!(matches!(
            run_translation(&src, &cfg, &model, Some(&RangeOnly(0.5))),
            Err(Error::RestartsExhausted(2))
        ));
        let out = run_translation(&src, &cfg, &model, Some(&RangeOnly(0.001))).unwrap();
        assert_eq!(out.record.restarts, 0);

        let off = SamplerConfig { restart_enabled: false, ..cfg };
        assert!(run_translation(&src, &off, &model, Some(&RangeOnly(0.5))).is_ok());
    }

    #[test]
    fn batch_matches_individual_runs() {
        let cfg = small_cfg();
        let model = GaussianScore::new(Image::zeros(4, 4, 3), 0.5);
        let src = Image::filled(4, 4, 3, 0.3);
        let seeds = [3, 4, 5];
        let seq = run_batch(&src, &cfg, &seeds, &model, None, Parallelism::Sequential);
        let par = run_batch(&src, &cfg, &seeds, &model, None, Parallelism::Parallel);
        for ((a, b), &seed) in seq.iter().zip(&par).zip(&seeds) {
            let one = run_translation(&src, &SamplerConfig { seed, ..cfg.clone() }, &model, None).unwrap();
            assert_eq!(a.as_ref().unwrap().image, one.image);
            assert_eq!(b.as_ref().unwrap().image, one.image);
        }
    }

    #[test]
    fn identity_hook_cases() {
        let id = ToyIdentityEmbedder { factor: 2 };
        let x = Image::from_fn(4, 4, 3, |i, j, k| (i * j + k) as f64 / 20.0);
        let y = x.scale(0.5);
        assert_eq!(identity_hook(&x, &y, 100.0, None).unwrap(), 0.0);
        assert_eq!(identity_hook(&x, &y, 0.0, Some(&id)).unwrap(), 0.0);
        assert_eq!(identity_hook(&x, &x, 100.0, Some(&id)).unwrap(), 0.0);
        assert!(identity_hook(&x, &y, 100.0, Some(&id)).unwrap() > 0.0);
    }

    #[test]
    fn trajectory_jsonl_has_one_line_per_step() {
        let cfg = small_cfg();
        let model = GaussianScore::new(Image::zeros(4, 4, 3), 0.5);
        let q = Quadratic { target: Image::zeros(4, 4, 3) };
        let out = run_translation(&Image::zeros(4, 4, 3), &cfg, &model, Some(&q)).unwrap();
        let mut buf = Vec::new();
        out.record.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), cfg.guided_steps());
        let first: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.phase, Phase::Resample);
    }
}
