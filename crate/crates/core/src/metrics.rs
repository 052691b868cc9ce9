//! Distribution metrics over feature embeddings: simplified FID (diagonal
//! covariance), its class-wise average, and a perceptual distance slot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::extractors::{fit_to, StructureSemanticExtractor, TextImageEmbedder};
use crate::par::{self, Parallelism};
use crate::{Error, Image, Result};

/// Rows per shard when accumulating statistics. Fixed so that the merge
/// order, and therefore the result, does not depend on the thread count.
const SHARD_ROWS: usize = 64;

/// Sample mean and unbiased per-dimension variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub n: usize,
    pub mu: Array1<f64>,
    pub var_diag: Array1<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Running mean and sum of squared deviations, mergeable across shards.
#[derive(Debug, Clone)]
struct Moments {
    n: usize,
    mean: Array1<f64>,
    m2: Array1<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self { n: 0, mean: Array1::zeros(dim), m2: Array1::zeros(dim) }
    }

    fn push(&mut self, row: ArrayView1<f64>) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(row) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn merge(mut self, other: &Moments) -> Self {
        if other.n == 0 {
            return self;
        }
        if self.n == 0 {
            return other.clone();
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.n += other.n;
        self
    }
}

/// Mean and unbiased variance of the rows of `features`.
pub fn feature_stats(features: &Array2<f64>) -> Result<FeatureStats> {
    feature_stats_with(features, Parallelism::default())
}

pub fn feature_stats_with(features: &Array2<f64>, policy: Parallelism) -> Result<FeatureStats> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("feature statistics need at least 2 samples, got {n}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    let shards = n.div_ceil(SHARD_ROWS);
    let parts = par::map_range(policy, shards, |s| {
        let mut m = Moments::new(d);
        for r in s * SHARD_ROWS..((s + 1) * SHARD_ROWS).min(n) {
            m.push(features.row(r));
        }
        m
    });
    let total = parts.iter().fold(Moments::new(d), |acc, p| acc.merge(p));
    let var_diag = total.m2.mapv(|v| (v / (n - 1) as f64).max(0.0));
    Ok(FeatureStats { n, mu: total.mean, var_diag })
}

/// Fréchet distance between Gaussians with diagonal covariances:
/// `‖μa − μb‖² + Σ (√va − √vb)²`.
pub fn sfid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    if a.var_diag.iter().chain(b.var_diag.iter()).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("variances must be finite and non-negative".into()));
    }
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let cov_term: f64 = a.var_diag.iter().zip(&b.var_diag).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum();
    Ok(mean_term + cov_term)
}

/// Maps an image to the feature vector the metrics are computed on.
pub trait Featurizer: Sync {
    fn features(&self, x: &Image) -> Result<Array1<f64>>;
}

/// Image embeddings of a text-image embedder.
pub struct EmbedderFeatures<'a>(pub &'a dyn TextImageEmbedder);

impl Featurizer for EmbedderFeatures<'_> {
    fn features(&self, x: &Image) -> Result<Array1<f64>> {
        let (xe, _) = fit_to(x, self.0.input_size())?;
        Ok(self.0.embed_image(&xe)?.v)
    }
}

/// [CLS] tokens of a structure/semantic extractor.
pub struct ClsFeatures<'a>(pub &'a dyn StructureSemanticExtractor);

impl Featurizer for ClsFeatures<'_> {
    fn features(&self, x: &Image) -> Result<Array1<f64>> {
        let (xe, _) = fit_to(x, self.0.input_size())?;
        Ok(self.0.extract(&xe)?.cls)
    }
}

/// Stacks per-image features into an `n×D` matrix.
pub fn stack_features(rows: &[Array1<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("feature vectors differ in length".into()));
    }
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generated,
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class: String,
    pub role: Role,
    /// input image a generated entry was translated from
    pub source: Option<PathBuf>,
    pub line: usize,
}

/// Rows of `path,class,role[,source]`. Blank lines and lines starting with
/// `#` are ignored, as is a leading `path,class,role` header. Relative paths
/// are resolved against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalManifest {
    pub entries: Vec<ManifestEntry>,
}

impl EvalManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let row = raw.trim();
            if row.is_empty() || row.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = row.split(',').map(str::trim).collect();
            if entries.is_empty() && fields.first() == Some(&"path") {
                continue;
            }
            if !(3..=4).contains(&fields.len()) {
                return Err(Error::Manifest(format!(
                    "line {line}: expected path,class,role[,source], got {} fields",
                    fields.len()
                )));
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(Error::Manifest(format!("line {line}: empty path or class")));
            }
            let role = match fields[2].to_ascii_lowercase().as_str() {
                "generated" | "gen" => Role::Generated,
                "reference" | "ref" => Role::Reference,
                other => {
                    return Err(Error::Manifest(format!(
                        "line {line}: role must be generated or reference, got {other:?}"
                    )))
                }
            };
            let source = match fields.get(3) {
                Some(s) if !s.is_empty() => Some(base.join(s)),
                _ => None,
            };
            entries.push(ManifestEntry {
                path: base.join(fields[0]),
                class: fields[1].to_string(),
                role,
                source,
                line,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn classes(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entries.iter().map(|e| e.class.clone()).collect();
        out.sort();
        out.dedup();
        out
    }
}

/// Features of one class on each side.
#[derive(Debug, Clone, Default)]
pub struct ClassFeatures {
    pub generated: Vec<Array1<f64>>,
    pub reference: Vec<Array1<f64>>,
}

/// Mean over classes of the per-class SFID, plus the per-class values.
pub fn csfid_from_features(classes: &BTreeMap<String, ClassFeatures>) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut per_class = BTreeMap::new();
    for (name, cf) in classes {
        if cf.generated.is_empty() {
            continue;
        }
        if cf.reference.is_empty() {
            return Err(Error::InvalidArgument(format!("class {name:?} has no reference images")));
        }
        if cf.generated.len() < 2 || cf.reference.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {name:?} needs at least 2 images per side, has {} generated and {} reference",
                cf.generated.len(),
                cf.reference.len()
            )));
        }
        let g = feature_stats(&stack_features(&cf.generated)?)?;
        let r = feature_stats(&stack_features(&cf.reference)?)?;
        per_class.insert(name.clone(), sfid(&g, &r)?);
    }
    if per_class.is_empty() {
        return Err(Error::InvalidArgument("no generated images in manifest".into()));
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((mean, per_class))
}

/// Distance between two images that is symmetric and zero on identical
/// inputs.
pub trait PerceptualDistance: Sync {
    fn distance(&self, x: &Image, y: &Image) -> Result<f64>;
}

/// Mean squared difference averaged over a pyramid of 2×2 average poolings.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleL2 {
    pub scales: usize,
}

impl Default for MultiScaleL2 {
    fn default() -> Self {
        Self { scales: 3 }
    }
}

fn pool2(x: &Image) -> Image {
    let (h, w, c) = x.shape();
    let (ph, pw) = (h / 2, w / 2);
    Image::from_fn(ph, pw, c, |i, j, k| {
        (x.get(2 * i, 2 * j, k) + x.get(2 * i + 1, 2 * j, k) + x.get(2 * i, 2 * j + 1, k) + x.get(2 * i + 1, 2 * j + 1, k))
            / 4.0
    })
}

impl PerceptualDistance for MultiScaleL2 {
    fn distance(&self, x: &Image, y: &Image) -> Result<f64> {
        x.ensure_same_shape(y)?;
        let (mut a, mut b) = (x.clone(), y.clone());
        let mut total = 0.0;
        let mut used = 0;
        for s in 0..self.scales.max(1) {
            if s > 0 {
                if a.height() < 2 || a.width() < 2 {
                    break;
                }
                a = pool2(&a);
                b = pool2(&b);
            }
            let d = a.sub(&b)?;
            total += d.dot(&d)? / d.len() as f64;
            used += 1;
        }
        Ok(total / used as f64)
    }
}

/// Uses the registered adapter, or the multi-scale L2 fallback when allowed.
pub fn perceptual_distance(
    x: &Image,
    y: &Image,
    adapter: Option<&dyn PerceptualDistance>,
    allow_fallback: bool,
) -> Result<f64> {
    match adapter {
        Some(a) => a.distance(x, y),
        None if allow_fallback => MultiScaleL2::default().distance(x, y),
        None => Err(Error::InvalidArgument("no perceptual-distance adapter registered and fallback disabled".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// SFID between all generated and all reference images
    pub sfid: f64,
    pub csfid: f64,
    pub per_class: BTreeMap<String, f64>,
    /// mean distance between generated images and their sources, when given
    pub mean_perceptual: Option<f64>,
    pub generated: usize,
    pub reference: usize,
}

/// Computes the full report for a manifest. `load` decodes an image path.
pub fn evaluate_manifest(
    manifest: &EvalManifest,
    featurizer: &dyn Featurizer,
    perceptual: Option<&dyn PerceptualDistance>,
    load: &(dyn Fn(&Path) -> Result<Image> + Sync),
    policy: Parallelism,
) -> Result<EvalReport> {
    let features = par::map_slice(policy, &manifest.entries, |e| {
        load(&e.path).and_then(|x| featurizer.features(&x)).map_err(|err| {
            Error::Manifest(format!("line {}: {}: {err}", e.line, e.path.display()))
        })
    });
    let mut classes: BTreeMap<String, ClassFeatures> = BTreeMap::new();
    let (mut all_gen, mut all_ref) = (Vec::new(), Vec::new());
    for (e, f) in manifest.entries.iter().zip(features) {
        let f = f?;
        let slot = classes.entry(e.class.clone()).or_default();
        match e.role {
            Role::Generated => {
                slot.generated.push(f.clone());
                all_gen.push(f);
            }
            Role::Reference => {
                slot.reference.push(f.clone());
                all_ref.push(f);
            }
        }
    }
    if all_gen.len() < 2 || all_ref.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 generated and 2 reference images, have {} and {}",
            all_gen.len(),
            all_ref.len()
        )));
    }
    let sfid_all = sfid(&feature_stats(&stack_features(&all_gen)?)?, &feature_stats(&stack_features(&all_ref)?)?)?;
    let (csfid, per_class) = csfid_from_features(&classes)?;

    let pairs: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| e.source.is_some()).collect();
    let mean_perceptual = if pairs.is_empty() {
        None
    } else {
        let dists = par::map_slice(policy, &pairs, |e| {
            let x = load(e.source.as_deref().expect("filtered"))?;
            let y = load(&e.path)?;
            let (y, _) = fit_to(&y, Some((x.height(), x.width())))?;
            perceptual_distance(&x, &y, perceptual, true)
        });
        let mut total = 0.0;
        for d in dists {
            total += d?;
        }
        Some(total / pairs.len() as f64)
    };
    Ok(EvalReport {
        sfid: sfid_all,
        csfid,
        per_class,
        mean_perceptual,
        generated: all_gen.len(),
        reference: all_ref.len(),
    })
}
