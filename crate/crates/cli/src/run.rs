//! The translate, replay and eval commands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use semtrans::color::{color_match, color_match_unclamped};
use semtrans::extractors::{
    ClipEmbedder, EnsembleConfig, IdentityEmbedder, StructureSemanticExtractor, TextImageEmbedder, ToyEmbedder,
    ToyIdentityEmbedder, ToyPatchExtractor, VitConfig, VitExtractor,
};
use semtrans::guidance::{GuidanceTask, LossTerms, Mode, Objective};
use semtrans::io::{load_image, save_png};
use semtrans::metrics::{evaluate_manifest, ClsFeatures, EmbedderFeatures, EvalManifest, EvalReport, Featurizer};
use semtrans::rng::NoiseStream;
use semtrans::sampler::{run_translation, Translation};
use semtrans::score::{PixelMixtureScore, ScoreModel};
use semtrans::toy::{train_score_model, ShapeSpec, ToyDataset, TOY_SIZE};
use semtrans::{Image, Parallelism};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{mode_name, Backend, RunConfig, Settings};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUTPUT_FILE: &str = "output.png";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";

const TOY_TEXTURE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    DryRun,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputHash {
    pub file: String,
    pub sha256: String,
}

/// Everything needed to audit or repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: Status,
    pub error: Option<String>,
    pub config: Option<RunConfig>,
    pub seed: Option<u64>,
    /// guided steps the schedule calls for
    pub planned_steps: Option<usize>,
    /// guided steps actually logged (excluding discarded restarts)
    pub steps: Option<usize>,
    pub restarts: Option<usize>,
    pub final_losses: Option<LossTerms>,
    pub final_total: Option<f64>,
    pub wall_time_s: f64,
    pub outputs: Vec<OutputHash>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            status: Status::Failed,
            error: None,
            config: None,
            seed: None,
            planned_steps: None,
            steps: None,
            restarts: None,
            final_losses: None,
            final_total: None,
            wall_time_s: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| runtime(&path, e))
    }
}

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| runtime(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Result of a command: the manifest (if one was written) and the error, if any.
pub struct Outcome {
    pub manifest: Option<RunManifest>,
    pub error: Option<CliError>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        self.error.as_ref().map_or(0, |e| e.exit_code())
    }
}

/// Loads the config file (if any), overlays the command-line settings and
/// runs one translation.
pub fn translate(mode: Mode, cli: Settings, config_file: Option<&Path>, dry_run: bool) -> Outcome {
    let command = format!("translate-{}", mode_name(mode));
    let file = match config_file.map(Settings::load).transpose() {
        Ok(f) => f.unwrap_or_default(),
        Err(e) => {
            return finish_early(&command, cli.out_dir.clone(), e);
        }
    };
    let merged = cli.over(file);
    let out_hint = merged.out_dir.clone();
    match RunConfig::resolve(mode, merged) {
        Ok(cfg) => execute(&command, cfg, dry_run),
        Err(e) => finish_early(&command, out_hint, e),
    }
}

/// Repeats the run recorded in a manifest, writing to `out_dir`.
pub fn replay(manifest: &Path, out_dir: PathBuf) -> Outcome {
    match RunManifest::load(manifest).and_then(|m| {
        m.config.ok_or_else(|| CliError::Config(format!("{} holds no resolved config", manifest.display())))
    }) {
        Ok(cfg) => {
            let cfg = RunConfig { out_dir, ..cfg };
            if let Err(e) = cfg.validate() {
                return finish_early("replay", Some(cfg.out_dir), e);
            }
            execute("replay", cfg, false)
        }
        Err(e) => finish_early("replay", Some(out_dir), e),
    }
}

fn finish_early(command: &str, out_dir: Option<PathBuf>, error: CliError) -> Outcome {
    let mut manifest = RunManifest::new(command);
    manifest.error = Some(error.to_string());
    let written = out_dir.is_some_and(|d| manifest.write(&d).is_ok());
    Outcome { manifest: written.then_some(manifest), error: Some(error) }
}

struct Models {
    score: Box<dyn ScoreModel>,
    extractor: Box<dyn StructureSemanticExtractor>,
    embedder: Option<Box<dyn TextImageEmbedder>>,
    identity: Option<Box<dyn IdentityEmbedder>>,
}

fn input_error(what: &str, e: semtrans::Error) -> CliError {
    CliError::Config(format!("{what}: {e}"))
}

fn load_models(cfg: &RunConfig) -> Result<Models, CliError> {
    match cfg.backend {
        Backend::Toy => {
            let data = ToyDataset::generate(20, TOY_TEXTURE, 7);
            let score = train_score_model(&data, 0).map_err(|e| CliError::Runtime(format!("toy training: {e}")))?;
            Ok(Models {
                score: Box::new(score),
                extractor: Box::new(ToyPatchExtractor::new(cfg.toy_patch).map_err(|e| input_error("toy_patch", e))?),
                embedder: Some(Box::new(ToyEmbedder::default())),
                identity: Some(Box::new(ToyIdentityEmbedder { factor: 4 })),
            })
        }
        Backend::Checkpoint => {
            let path = cfg.score_checkpoint.as_deref().expect("validated");
            let score = PixelMixtureScore::load_json(path).map_err(|e| input_error("score_checkpoint", e))?;
            let path = cfg.extractor_config.as_deref().expect("validated");
            let extractor = VitConfig::load(path)
                .and_then(|c| VitExtractor::load(&c))
                .map_err(|e| input_error("extractor_config", e))?;
            let embedder: Option<Box<dyn TextImageEmbedder>> = match &cfg.embedder_config {
                Some(path) if cfg.mode == Mode::Text => Some(Box::new(
                    EnsembleConfig::load(path)
                        .and_then(|c| ClipEmbedder::load(&c))
                        .map_err(|e| input_error("embedder_config", e))?,
                )),
                _ => None,
            };
            Ok(Models { score: Box::new(score), extractor: Box::new(extractor), embedder, identity: None })
        }
    }
}

/// Source and (image mode) target images, drawing toy ones when absent.
fn load_inputs(cfg: &RunConfig) -> Result<(Image, Option<Image>, Vec<(&'static str, Image)>), CliError> {
    let mut drawn = Vec::new();
    let source = match &cfg.source {
        Some(p) => load_image(p).map_err(|e| input_error(&format!("source {}", p.display()), e))?,
        None => {
            let mut rng = NoiseStream::derived(cfg.sampler.seed, 100);
            let x = ShapeSpec::random(&mut rng, TOY_SIZE).render(TOY_SIZE, 0, TOY_TEXTURE, &mut rng);
            drawn.push(("source.png", x.clone()));
            x
        }
    };
    let target = match (cfg.mode, &cfg.target_image) {
        (Mode::Text, _) => None,
        (Mode::Image, Some(p)) => {
            Some(load_image(p).map_err(|e| input_error(&format!("target_image {}", p.display()), e))?)
        }
        (Mode::Image, None) => {
            let mut rng = NoiseStream::derived(cfg.sampler.seed, 101);
            let x = ShapeSpec::random(&mut rng, TOY_SIZE).render(TOY_SIZE, 1, TOY_TEXTURE, &mut rng);
            drawn.push(("target.png", x.clone()));
            Some(x)
        }
    };
    if source.channels() != 3 || target.as_ref().is_some_and(|t| t.channels() != 3) {
        return Err(CliError::Config("source and target images must be RGB".into()));
    }
    Ok((source, target, drawn))
}

fn execute(command: &str, cfg: RunConfig, dry_run: bool) -> Outcome {
    let start = Instant::now();
    let mut manifest = RunManifest::new(command);
    manifest.seed = Some(cfg.sampler.seed);
    manifest.planned_steps = Some(cfg.sampler.guided_steps());
    manifest.config = Some(cfg.clone());
    let result = if dry_run { dry(&cfg) } else { translate_run(&cfg, &mut manifest) };
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    let error = match result {
        Ok(()) => {
            manifest.status = if dry_run { Status::DryRun } else { Status::Ok };
            None
        }
        Err(e) => {
            manifest.status = Status::Failed;
            manifest.error = Some(e.to_string());
            Some(e)
        }
    };
    match manifest.write(&cfg.out_dir) {
        Ok(()) => Outcome { manifest: Some(manifest), error },
        Err(e) => Outcome { manifest: None, error: Some(error.unwrap_or(e)) },
    }
}

fn dry(cfg: &RunConfig) -> Result<(), CliError> {
    load_inputs(cfg)?;
    if cfg.backend == Backend::Checkpoint {
        load_models(cfg)?;
    }
    Ok(())
}

fn translate_run(cfg: &RunConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let (source, target, drawn) = load_inputs(cfg)?;
    let models = load_models(cfg)?;
    let task = match cfg.mode {
        Mode::Text => GuidanceTask::text(
            source.clone(),
            cfg.target_text.as_deref().expect("validated"),
            cfg.source_text.as_deref().expect("validated"),
        ),
        Mode::Image => GuidanceTask::image(source.clone(), target.clone().expect("loaded")),
    };
    let objective = Objective::new(
        &task,
        cfg.weights.clone(),
        models.extractor.as_ref(),
        models.embedder.as_deref(),
        models.identity.as_deref(),
    )
    .and_then(|o| o.with_augment(cfg.sampler.augment.clone(), cfg.sampler.views))
    .map_err(|e| CliError::Config(format!("guidance setup: {e}")))?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| runtime(&cfg.out_dir, e))?;
    let mut files = Vec::new();
    for (name, img) in &drawn {
        let path = cfg.out_dir.join(name);
        save_png(img, &path).map_err(|e| runtime(&path, e))?;
        files.push(name.to_string());
    }

    let out: Translation = run_translation(&source, &cfg.sampler, models.score.as_ref(), Some(&objective))
        .map_err(|e| CliError::Runtime(format!("sampling: {e}")))?;
    let mut image = out.image;
    if cfg.color_match {
        let reference = target.as_ref().expect("image mode");
        image = if cfg.final_clamp { color_match(&image, reference) } else { color_match_unclamped(&image, reference) }
            .map_err(|e| CliError::Runtime(format!("colour matching: {e}")))?;
    }
    let out_path = cfg.out_dir.join(OUTPUT_FILE);
    save_png(&image, &out_path).map_err(|e| runtime(&out_path, e))?;
    files.push(OUTPUT_FILE.into());

    let traj_path = cfg.out_dir.join(TRAJECTORY_FILE);
    let file = File::create(&traj_path).map_err(|e| runtime(&traj_path, e))?;
    let mut w = BufWriter::new(file);
    out.record.write_jsonl(&mut w).map_err(|e| runtime(&traj_path, e))?;
    w.flush().map_err(|e| runtime(&traj_path, e))?;
    files.push(TRAJECTORY_FILE.into());

    manifest.steps = Some(out.record.steps.len());
    manifest.restarts = Some(out.record.restarts);
    manifest.final_losses = out.record.last_terms().cloned();
    manifest.final_total = out.record.steps.last().map(|s| s.total);
    for f in files {
        let sha256 = sha256_file(&cfg.out_dir.join(&f))?;
        manifest.outputs.push(OutputHash { file: f, sha256 });
    }
    Ok(())
}

/// Options of the eval command.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub manifest: PathBuf,
    pub backend: Option<String>,
    pub embedder_config: Option<PathBuf>,
    pub extractor_config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn eval(opts: &EvalOptions) -> Result<EvalReport, CliError> {
    let manifest = EvalManifest::load(&opts.manifest).map_err(|e| CliError::Config(e.to_string()))?;
    let toy_emb = ToyEmbedder::default();
    let clip;
    let vit;
    let featurizer: Box<dyn Featurizer + '_> = match (opts.backend.as_deref().unwrap_or("toy"), &opts.embedder_config, &opts.extractor_config) {
        ("toy", None, None) => Box::new(EmbedderFeatures(&toy_emb)),
        ("checkpoint", Some(p), _) => {
            clip = EnsembleConfig::load(p).and_then(|c| ClipEmbedder::load(&c)).map_err(|e| input_error("embedder_config", e))?;
            Box::new(EmbedderFeatures(&clip))
        }
        ("checkpoint", None, Some(p)) => {
            vit = VitConfig::load(p).and_then(|c| VitExtractor::load(&c)).map_err(|e| input_error("extractor_config", e))?;
            Box::new(ClsFeatures(&vit))
        }
        ("checkpoint", None, None) => {
            return Err(CliError::Config("checkpoint eval needs --embedder-config or --extractor-config".into()))
        }
        ("toy", _, _) => return Err(CliError::Config("the toy backend takes no adapter configs".into())),
        (other, _, _) => return Err(CliError::Config(format!("backend must be \"checkpoint\" or \"toy\", got {other:?}"))),
    };
    let report = evaluate_manifest(&manifest, featurizer.as_ref(), None, &load_image, Parallelism::default())
        .map_err(|e| match e {
            semtrans::Error::Manifest(_) | semtrans::Error::InvalidArgument(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        })?;
    if let Some(out) = &opts.out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(out, text + "\n").map_err(|e| runtime(out, e))?;
    }
    Ok(report)
}
