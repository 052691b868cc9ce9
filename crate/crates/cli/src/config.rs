//! Run configuration: a flat TOML file overlaid by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use semtrans::extractors::AugmentConfig;
use semtrans::guidance::{GuidanceWeights, Mode};
use semtrans::sampler::SamplerConfig;
use semtrans::VarianceRule;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Relative checkpoint paths are resolved against this directory when set.
pub const CHECKPOINT_DIR_ENV: &str = "SEMTRANS_CHECKPOINT_DIR";

macro_rules! settings {
    ($($(#[$doc:meta])* $name:ident: $ty:ty,)*) => {
        /// One layer of settings. Every field is optional so that layers can
        /// be stacked: command line over config file over built-in defaults.
        #[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct Settings {
            $(
                $(#[$doc])*
                #[arg(long)]
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $name: Option<$ty>,
            )*
        }

        impl Settings {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Field by field, `self` where set and `lower` elsewhere.
            pub fn over(self, lower: Settings) -> Settings {
                Settings { $($name: self.$name.or(lower.$name),)* }
            }
        }
    };
}

settings! {
    /// source image (PNG/JPEG); the toy backend draws one when omitted
    source: PathBuf,
    /// target text d_trg
    target_text: String,
    /// source text d_src
    source_text: String,
    /// style image x_trg
    target_image: PathBuf,
    /// run directory for outputs, manifest and trajectory log
    out_dir: PathBuf,
    /// "checkpoint" or "toy"
    backend: String,
    /// pixel-mixture score model (JSON)
    score_checkpoint: PathBuf,
    /// ViT adapter config (JSON)
    extractor_config: PathBuf,
    /// CLIP ensemble adapter config (JSON)
    embedder_config: PathBuf,
    /// patch size of the toy extractor
    toy_patch: usize,
    train_steps: usize,
    beta_min: f64,
    beta_max: f64,
    /// "beta" or "posterior"
    variance_rule: String,
    schedule_steps: usize,
    skip: usize,
    resample: usize,
    restart_enabled: bool,
    restart_threshold: f64,
    max_restarts: usize,
    views: usize,
    seed: u64,
    snapshot_every: usize,
    full_gradient: bool,
    aug_min_crop: f64,
    aug_max_crop: f64,
    aug_flip_prob: f64,
    aug_max_rotation_deg: f64,
    aug_noise_mix: f64,
    lambda_cont: f64,
    lambda_ssim: f64,
    lambda_style: f64,
    lambda_sem: f64,
    lambda_rng: f64,
    lambda_mse: f64,
    lambda_s: f64,
    lambda_i: f64,
    tau: f64,
    lambda_id: f64,
    global_clip: bool,
    /// match the output colours to the style image (image mode)
    color_match: bool,
    /// clamp the colour-matched output to [-1, 1]
    final_clamp: bool,
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Checkpoint,
    Toy,
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub backend: Backend,
    pub source: Option<PathBuf>,
    pub target_text: Option<String>,
    pub source_text: Option<String>,
    pub target_image: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub score_checkpoint: Option<PathBuf>,
    pub extractor_config: Option<PathBuf>,
    pub embedder_config: Option<PathBuf>,
    pub toy_patch: usize,
    pub sampler: SamplerConfig,
    pub weights: GuidanceWeights,
    pub color_match: bool,
    pub final_clamp: bool,
}

/// Weights that work on the 32×32 toy problem. The library defaults are tuned
/// for ViT features and overshoot there.
pub fn toy_weights() -> GuidanceWeights {
    GuidanceWeights {
        lambda_cont: 0.1,
        lambda_ssim: 0.1,
        lambda_style: 30.0,
        lambda_sem: 0.0,
        lambda_rng: 1.0,
        ..GuidanceWeights::default()
    }
}

fn checkpoint_path(p: Option<PathBuf>, root: Option<&Path>) -> Option<PathBuf> {
    p.map(|p| match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p,
    })
}

impl RunConfig {
    /// Resolves a settings stack (already merged, highest precedence first)
    /// against the defaults for `mode`.
    pub fn resolve(mode: Mode, s: Settings) -> Result<Self, CliError> {
        let backend = match s.backend.as_deref().unwrap_or("checkpoint") {
            "checkpoint" => Backend::Checkpoint,
            "toy" => Backend::Toy,
            other => return Err(CliError::Config(format!("backend must be \"checkpoint\" or \"toy\", got {other:?}"))),
        };
        let d = SamplerConfig::for_mode(mode);
        let da = AugmentConfig::default();
        let variance_rule = match s.variance_rule.as_deref() {
            None => d.variance_rule,
            Some("beta") => VarianceRule::Beta,
            Some("posterior") => VarianceRule::Posterior,
            Some(other) => {
                return Err(CliError::Config(format!("variance_rule must be \"beta\" or \"posterior\", got {other:?}")))
            }
        };
        let sampler = SamplerConfig {
            mode,
            train_steps: s.train_steps.unwrap_or(d.train_steps),
            beta_min: s.beta_min.unwrap_or(d.beta_min),
            beta_max: s.beta_max.unwrap_or(d.beta_max),
            variance_rule,
            schedule_steps: s.schedule_steps.unwrap_or(d.schedule_steps),
            skip: s.skip.unwrap_or(d.skip),
            resample: s.resample.unwrap_or(d.resample),
            restart_enabled: s.restart_enabled.unwrap_or(d.restart_enabled),
            restart_threshold: s.restart_threshold.unwrap_or(d.restart_threshold),
            max_restarts: s.max_restarts.unwrap_or(d.max_restarts),
            views: s.views.unwrap_or(d.views),
            augment: AugmentConfig {
                min_crop: s.aug_min_crop.unwrap_or(da.min_crop),
                max_crop: s.aug_max_crop.unwrap_or(da.max_crop),
                flip_prob: s.aug_flip_prob.unwrap_or(da.flip_prob),
                max_rotation_deg: s.aug_max_rotation_deg.unwrap_or(da.max_rotation_deg),
                noise_mix: s.aug_noise_mix.unwrap_or(da.noise_mix),
                identity_only: false,
            },
            seed: s.seed.unwrap_or(d.seed),
            snapshot_every: s.snapshot_every.unwrap_or(d.snapshot_every),
            full_gradient: s.full_gradient.unwrap_or(d.full_gradient),
            keep_states: false,
        };
        let dw = if backend == Backend::Toy { toy_weights() } else { GuidanceWeights::default() };
        let weights = GuidanceWeights {
            lambda_cont: s.lambda_cont.unwrap_or(dw.lambda_cont),
            lambda_ssim: s.lambda_ssim.unwrap_or(dw.lambda_ssim),
            lambda_style: s.lambda_style.unwrap_or(dw.lambda_style),
            lambda_sem: s.lambda_sem.unwrap_or(dw.lambda_sem),
            lambda_rng: s.lambda_rng.unwrap_or(dw.lambda_rng),
            lambda_mse: s.lambda_mse.unwrap_or(dw.lambda_mse),
            lambda_s: s.lambda_s.unwrap_or(dw.lambda_s),
            lambda_i: s.lambda_i.unwrap_or(dw.lambda_i),
            tau: s.tau.unwrap_or(dw.tau),
            lambda_id: s.lambda_id.unwrap_or(dw.lambda_id),
            global_clip: s.global_clip.unwrap_or(dw.global_clip),
        };
        let toy = backend == Backend::Toy;
        let (target_text, source_text) = match mode {
            Mode::Text if toy => (
                Some(s.target_text.unwrap_or_else(|| "blue".into())),
                Some(s.source_text.unwrap_or_else(|| "red".into())),
            ),
            _ => (s.target_text, s.source_text),
        };
        let root = std::env::var_os(CHECKPOINT_DIR_ENV).map(PathBuf::from);
        let cfg = RunConfig {
            mode,
            backend,
            source: s.source,
            target_text,
            source_text,
            target_image: s.target_image,
            out_dir: s.out_dir.unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", mode_name(mode), sampler.seed))),
            score_checkpoint: checkpoint_path(s.score_checkpoint, root.as_deref()),
            extractor_config: checkpoint_path(s.extractor_config, root.as_deref()),
            embedder_config: checkpoint_path(s.embedder_config, root.as_deref()),
            toy_patch: s.toy_patch.unwrap_or(1),
            sampler,
            weights,
            color_match: s.color_match.unwrap_or(false),
            final_clamp: s.final_clamp.unwrap_or(true),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |m: String| Err(CliError::Config(m));
        self.sampler.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let w = &self.weights;
        for (name, v) in [
            ("lambda_cont", w.lambda_cont),
            ("lambda_ssim", w.lambda_ssim),
            ("lambda_style", w.lambda_style),
            ("lambda_sem", w.lambda_sem),
            ("lambda_rng", w.lambda_rng),
            ("lambda_mse", w.lambda_mse),
            ("lambda_id", w.lambda_id),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return cfg_err(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(w.tau > 0.0) {
            return cfg_err(format!("tau must be positive, got {}", w.tau));
        }
        if self.toy_patch == 0 {
            return cfg_err("toy_patch must be at least 1".into());
        }
        match self.mode {
            Mode::Text => {
                if self.target_text.as_deref().is_none_or(|t| t.trim().is_empty()) {
                    return cfg_err("text mode needs target_text (--target-text)".into());
                }
                if self.source_text.as_deref().is_none_or(|t| t.trim().is_empty()) {
                    return cfg_err("text mode needs source_text (--source-text)".into());
                }
                if self.target_image.is_some() {
                    return cfg_err("target_image is only used in image mode".into());
                }
                if self.color_match {
                    return cfg_err("color_match needs a style image and is only available in image mode".into());
                }
            }
            Mode::Image => {
                if self.target_image.is_none() && self.backend != Backend::Toy {
                    return cfg_err("image mode needs target_image (--target-image)".into());
                }
                if self.target_text.is_some() || self.source_text.is_some() {
                    return cfg_err("target_text/source_text are only used in text mode".into());
                }
            }
        }
        if self.backend == Backend::Checkpoint {
            if self.source.is_none() {
                return cfg_err("source is not set (config key `source`, flag --source)".into());
            }
            require_file(&self.score_checkpoint, "score_checkpoint")?;
            require_file(&self.extractor_config, "extractor_config")?;
            if self.mode == Mode::Text {
                require_file(&self.embedder_config, "embedder_config")?;
            }
        }
        Ok(())
    }
}

fn require_file(path: &Option<PathBuf>, key: &str) -> Result<(), CliError> {
    let flag = key.replace('_', "-");
    match path {
        None => Err(CliError::Config(format!(
            "{key} is not set (config key `{key}`, flag --{flag}; relative paths resolve against ${CHECKPOINT_DIR_ENV})"
        ))),
        Some(p) if !p.is_file() => Err(CliError::Config(format!(
            "{key} points to {}, which does not exist (config key `{key}`, flag --{flag})",
            p.display()
        ))),
        Some(_) => Ok(()),
    }
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Text => "text",
        Mode::Image => "image",
    }
}
