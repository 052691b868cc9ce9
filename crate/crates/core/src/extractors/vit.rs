//! Pretrained vision-transformer adapters loaded from safetensors checkpoints.
//!
//! Two weight layouts are understood: Hugging Face `ViTModel` checkpoints
//! (DINO and similar, including the older `encoder.layer.N.attention.attention`
//! naming) and the vision tower of `CLIPModel` with its projection. Inference
//! runs in f64 and the backward pass is written out by hand.
//!
//! Text embeddings for CLIP come from a precomputed JSON table mapping prompt
//! to vector; see `tools/clip_text_table.py`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Axis};
use safetensors::{Dtype, SafeTensors};
use serde::Deserialize;

use super::{check_input_size, FeaturePullback, StructureSemanticExtractor, TextImageEmbedder, VectorPullback};
use crate::guidance::{embed_ensemble, loss::embed_ensemble_vjp, EmbeddingVector, FeatureBundle};
use crate::{Error, Image, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    HfVit,
    HfClipVision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    QuickGelu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * z * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::QuickGelu => z * sigmoid(1.702 * z),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + z * pdf
            }
            Activation::QuickGelu => {
                let sg = sigmoid(1.702 * z);
                sg + 1.702 * z * sg * (1.0 - sg)
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Everything needed to build one transformer. Dimensions are read from the
/// checkpoint; the rest has to be stated.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub layout: Layout,
    pub weights: PathBuf,
    /// Prefix in front of every tensor name. When absent the usual prefixes
    /// for the layout are tried.
    #[serde(default)]
    pub prefix: Option<String>,
    /// Name of the image projection tensor (CLIP only).
    #[serde(default)]
    pub projection: Option<String>,
    pub image_size: usize,
    pub heads: usize,
    pub ln_eps: f64,
    /// 1-based block whose key projection supplies the structure keys.
    pub key_layer: usize,
    pub activation: Activation,
    /// Per-channel normalisation applied to `[0, 1]` pixels.
    pub mean: [f64; 3],
    pub std: [f64; 3],
    #[serde(default)]
    pub text_embeddings: Option<PathBuf>,
}

impl VitConfig {
    /// Reads a JSON config; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read adapter config {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        self.weights = base.join(&self.weights);
        if let Some(t) = &self.text_embeddings {
            self.text_embeddings = Some(base.join(t));
        }
    }
}

/// A list of CLIP towers forming one ensemble embedder.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: Vec<VitConfig>,
}

impl EnsembleConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read adapter config {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut cfg.members {
            m.resolve(base);
        }
        Ok(cfg)
    }
}

struct Weights<'a> {
    st: SafeTensors<'a>,
    prefix: String,
    source: String,
}

impl Weights<'_> {
    fn find(&self, names: &[String]) -> Option<String> {
        let have = self.st.names();
        names.iter().map(|n| format!("{}{n}", self.prefix)).find(|n| have.iter().any(|h| *h == n))
    }

    fn get(&self, names: &[String]) -> Result<Option<(Vec<f64>, Vec<usize>)>> {
        let Some(name) = self.find(names) else { return Ok(None) };
        let view = self.st.tensor(&name).map_err(|e| Error::Checkpoint(format!("{}: {e}", self.source)))?;
        let bytes = view.data();
        let values: Vec<f64> = match view.dtype() {
            Dtype::F64 => bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
            Dtype::F32 => bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            Dtype::F16 => bytes.chunks_exact(2).map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f64()).collect(),
            Dtype::BF16 => bytes.chunks_exact(2).map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f64()).collect(),
            other => {
                return Err(Error::Checkpoint(format!("{}: tensor {name} has unsupported dtype {other:?}", self.source)))
            }
        };
        Ok(Some((values, view.shape().to_vec())))
    }

    fn require(&self, names: &[String]) -> Result<(Vec<f64>, Vec<usize>)> {
        self.get(names)?.ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing tensor {}{}", self.source, self.prefix, names[0]))
        })
    }

    fn vector(&self, names: &[String], len: usize) -> Result<Array1<f64>> {
        let (v, _) = self.require(names)?;
        if v.len() != len {
            return Err(Error::Checkpoint(format!("{}: {} has {} values, expected {len}", self.source, names[0], v.len())));
        }
        Ok(Array1::from(v))
    }

    fn matrix(&self, names: &[String]) -> Result<Array2<f64>> {
        let (v, shape) = self.require(names)?;
        let rows = shape.first().copied().unwrap_or(0);
        let cols = if rows == 0 { 0 } else { v.len() / rows };
        Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Checkpoint(format!("{}: {e}", self.source)))
    }

    fn linear(&self, stem: &[String], bias: bool) -> Result<Linear> {
        let w = self.matrix(&suffixed(stem, ".weight"))?;
        let b = if bias { Some(self.vector(&suffixed(stem, ".bias"), w.nrows())?) } else { None };
        Ok(Linear { w, b })
    }

    fn layer_norm(&self, stem: &[String], dim: usize, eps: f64) -> Result<LayerNorm> {
        Ok(LayerNorm {
            g: self.vector(&suffixed(stem, ".weight"), dim)?,
            b: self.vector(&suffixed(stem, ".bias"), dim)?,
            eps,
        })
    }
}

fn suffixed(stems: &[String], suffix: &str) -> Vec<String> {
    stems.iter().map(|s| format!("{s}{suffix}")).collect()
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone)]
struct Linear {
    /// `out × in`
    w: Array2<f64>,
    b: Option<Array1<f64>>,
}

impl Linear {
    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        if let Some(b) = &self.b {
            y += b;
        }
        y
    }

    fn backward(&self, dy: &Array2<f64>) -> Array2<f64> {
        dy.dot(&self.w)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    g: Array1<f64>,
    b: Array1<f64>,
    eps: f64,
}

struct NormTrace {
    xhat: Array2<f64>,
    inv: Array1<f64>,
}

impl LayerNorm {
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormTrace) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv = Array1::zeros(x.nrows());
        for (mut row, iv) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
            let mu = row.sum() / d;
            row.mapv_inplace(|v| v - mu);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *iv = 1.0 / (var + self.eps).sqrt();
            row *= *iv;
        }
        let y = &xhat * &self.g + &self.b;
        (y, NormTrace { xhat, inv })
    }

    fn backward(&self, t: &NormTrace, dy: &Array2<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.g;
        for ((mut row, xh), iv) in dx.rows_mut().into_iter().zip(t.xhat.rows()).zip(&t.inv) {
            let m1 = row.sum() / d;
            let m2 = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
            for (v, x) in row.iter_mut().zip(xh) {
                *v = iv * (*v - m1 - x * m2);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct BlockTrace {
    ln1: NormTrace,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ln2: NormTrace,
    z: Array2<f64>,
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        row.mapv_inplace(|v| (v - mx).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl Block {
    fn forward(&self, h: &Array2<f64>, heads: usize, act: Activation) -> (Array2<f64>, BlockTrace) {
        let (a, ln1) = self.ln1.forward(h);
        let (q, k, v) = (self.q.forward(&a), self.k.forward(&a), self.v.forward(&a));
        let dh = q.ncols() / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = Array2::zeros(q.dim());
        let mut attn = Vec::with_capacity(heads);
        for hd in 0..heads {
            let r = s![.., hd * dh..(hd + 1) * dh];
            let mut sm = q.slice(r).dot(&k.slice(r).t()) * scale;
            softmax_rows(&mut sm);
            o.slice_mut(r).assign(&sm.dot(&v.slice(r)));
            attn.push(sm);
        }
        let h1 = h + &self.o.forward(&o);
        let (m, ln2) = self.ln2.forward(&h1);
        let z = self.fc1.forward(&m);
        let out = &h1 + &self.fc2.forward(&z.mapv(|t| act.apply(t)));
        (out, BlockTrace { ln1, q, k, v, attn, ln2, z })
    }

    fn backward(&self, t: &BlockTrace, dout: &Array2<f64>, d_keys: Option<&Array2<f64>>, act: Activation) -> Array2<f64> {
        let mut dz = self.fc2.backward(dout);
        dz.zip_mut_with(&t.z, |g, z| *g *= act.derivative(*z));
        let dh1 = dout + &self.ln2.backward(&t.ln2, &self.fc1.backward(&dz));
        let d_o = self.o.backward(&dh1);
        let heads = t.attn.len();
        let dh = t.q.ncols() / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(t.q.dim());
        let mut dk = Array2::zeros(t.k.dim());
        let mut dv = Array2::zeros(t.v.dim());
        for (hd, a) in t.attn.iter().enumerate() {
            let r = s![.., hd * dh..(hd + 1) * dh];
            let doh = d_o.slice(r);
            dv.slice_mut(r).assign(&a.t().dot(&doh));
            let da = doh.dot(&t.v.slice(r).t());
            let mut ds = a * &da;
            let rowsum = ds.sum_axis(Axis(1));
            ds -= &(a * &rowsum.insert_axis(Axis(1)));
            ds *= scale;
            dq.slice_mut(r).assign(&ds.dot(&t.k.slice(r)));
            dk.slice_mut(r).assign(&ds.t().dot(&t.q.slice(r)));
        }
        if let Some(extra) = d_keys {
            dk += extra;
        }
        let da = self.q.backward(&dq) + self.k.backward(&dk) + self.v.backward(&dv);
        &dh1 + &self.ln1.backward(&t.ln1, &da)
    }
}

/// A loaded vision transformer.
#[derive(Debug, Clone)]
pub struct VitModel {
    layout: Layout,
    image_size: usize,
    patch: usize,
    grid: usize,
    heads: usize,
    key_layer: usize,
    act: Activation,
    mean: [f64; 3],
    std: [f64; 3],
    patch_embed: Linear,
    cls_token: Array1<f64>,
    pos: Array2<f64>,
    pre_ln: Option<LayerNorm>,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    projection: Option<Array2<f64>>,
}

/// Forward results plus what the backward pass needs.
pub struct VitForward {
    /// Patch-token keys at the configured layer (the class token is dropped).
    pub keys: Array2<f64>,
    /// Final-layer class token after the last layer norm.
    pub cls: Array1<f64>,
    /// Projected class token, if the checkpoint has a projection.
    pub embedding: Option<Array1<f64>>,
    pre_ln: Option<NormTrace>,
    blocks: Vec<BlockTrace>,
    final_ln: NormTrace,
}

impl VitModel {
    pub fn load(cfg: &VitConfig) -> Result<Self> {
        let bytes = std::fs::read(&cfg.weights).map_err(|e| {
            Error::Checkpoint(format!("cannot read checkpoint {}: {e}", cfg.weights.display()))
        })?;
        let source = cfg.weights.display().to_string();
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{source}: {e}")))?;
        Self::from_tensors(cfg, st, source)
    }

    fn from_tensors(cfg: &VitConfig, st: SafeTensors<'_>, source: String) -> Result<Self> {
        let clip = cfg.layout == Layout::HfClipVision;
        let cls_names = if clip { names(&["embeddings.class_embedding"]) } else { names(&["embeddings.cls_token"]) };
        let prefixes: Vec<String> = match (&cfg.prefix, clip) {
            (Some(p), _) => vec![p.clone()],
            (None, true) => names(&["vision_model.", ""]),
            (None, false) => names(&["", "vit."]),
        };
        let prefix = prefixes
            .iter()
            .find(|p| st.names().iter().any(|n| **n == format!("{p}{}", cls_names[0])))
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{source}: no {} tensor under prefixes {prefixes:?}", cls_names[0])))?;
        let w = Weights { st, prefix, source: source.clone() };
        let bad = |msg: String| Error::Checkpoint(format!("{source}: {msg}"));

        let (cls_vals, _) = w.require(&cls_names)?;
        let dim = cls_vals.len();
        let cls_token = Array1::from(cls_vals);
        let patch_names = if clip {
            names(&["embeddings.patch_embedding"])
        } else {
            names(&["embeddings.patch_embeddings.projection"])
        };
        let (pw, pshape) = w.require(&suffixed(&patch_names, ".weight"))?;
        if pshape.len() != 4 || pshape[0] != dim || pshape[1] != 3 || pshape[2] != pshape[3] {
            return Err(bad(format!("patch embedding has shape {pshape:?}")));
        }
        let patch = pshape[2];
        let patch_w = Array2::from_shape_vec((dim, 3 * patch * patch), pw).map_err(|e| bad(e.to_string()))?;
        let patch_b = match w.get(&suffixed(&patch_names, ".bias"))? {
            Some((b, _)) => Some(Array1::from(b)),
            None => None,
        };
        if cfg.image_size == 0 || cfg.image_size % patch != 0 {
            return Err(bad(format!("image size {} is not a multiple of the patch size {patch}", cfg.image_size)));
        }
        let grid = cfg.image_size / patch;
        let pos_names = if clip { names(&["embeddings.position_embedding.weight"]) } else { names(&["embeddings.position_embeddings"]) };
        let (pos_vals, _) = w.require(&pos_names)?;
        if pos_vals.len() != (grid * grid + 1) * dim {
            return Err(bad(format!(
                "position table has {} rows but a {grid}x{grid} grid needs {}",
                pos_vals.len() / dim.max(1),
                grid * grid + 1
            )));
        }
        let pos = Array2::from_shape_vec((grid * grid + 1, dim), pos_vals).map_err(|e| bad(e.to_string()))?;
        if cfg.heads == 0 || dim % cfg.heads != 0 {
            return Err(bad(format!("{} heads do not divide width {dim}", cfg.heads)));
        }

        let eps = cfg.ln_eps;
        let mut blocks = Vec::new();
        loop {
            let i = blocks.len();
            let stems: Vec<String> = if clip {
                vec![format!("encoder.layers.{i}.")]
            } else {
                vec![format!("layers.{i}."), format!("encoder.layer.{i}.")]
            };
            let first = if clip { "layer_norm1.weight" } else { "layernorm_before.weight" };
            let Some(found) = stems.iter().find(|s| w.find(&[format!("{s}{first}")]).is_some()) else { break };
            let at = |alts: &[&str]| -> Vec<String> { alts.iter().map(|a| format!("{found}{a}")).collect() };
            let block = if clip {
                Block {
                    ln1: w.layer_norm(&at(&["layer_norm1"]), dim, eps)?,
                    q: w.linear(&at(&["self_attn.q_proj"]), true)?,
                    k: w.linear(&at(&["self_attn.k_proj"]), true)?,
                    v: w.linear(&at(&["self_attn.v_proj"]), true)?,
                    o: w.linear(&at(&["self_attn.out_proj"]), true)?,
                    ln2: w.layer_norm(&at(&["layer_norm2"]), dim, eps)?,
                    fc1: w.linear(&at(&["mlp.fc1"]), true)?,
                    fc2: w.linear(&at(&["mlp.fc2"]), true)?,
                }
            } else {
                Block {
                    ln1: w.layer_norm(&at(&["layernorm_before"]), dim, eps)?,
                    q: w.linear(&at(&["attention.q_proj", "attention.attention.query"]), true)?,
                    k: w.linear(&at(&["attention.k_proj", "attention.attention.key"]), true)?,
                    v: w.linear(&at(&["attention.v_proj", "attention.attention.value"]), true)?,
                    o: w.linear(&at(&["attention.o_proj", "attention.output.dense"]), true)?,
                    ln2: w.layer_norm(&at(&["layernorm_after"]), dim, eps)?,
                    fc1: w.linear(&at(&["mlp.fc1", "intermediate.dense"]), true)?,
                    fc2: w.linear(&at(&["mlp.fc2", "output.dense"]), true)?,
                }
            };
            for l in [&block.q, &block.k, &block.v, &block.o] {
                if l.w.dim() != (dim, dim) {
                    return Err(bad(format!("block {i} attention weight has shape {:?}", l.w.dim())));
                }
            }
            if block.fc1.w.ncols() != dim || block.fc2.w.dim() != (dim, block.fc1.w.nrows()) {
                return Err(bad(format!("block {i} MLP shapes do not match width {dim}")));
            }
            blocks.push(block);
        }
        if cfg.key_layer == 0 || cfg.key_layer > blocks.len() {
            return Err(bad(format!("key layer {} outside 1..={}", cfg.key_layer, blocks.len())));
        }

        let (pre_ln, final_ln) = if clip {
            (Some(w.layer_norm(&names(&["pre_layrnorm"]), dim, eps)?), w.layer_norm(&names(&["post_layernorm"]), dim, eps)?)
        } else {
            (None, w.layer_norm(&names(&["layernorm"]), dim, eps)?)
        };
        let projection = if clip {
            let name = cfg.projection.clone().unwrap_or_else(|| "visual_projection.weight".into());
            let raw = Weights { st: w.st, prefix: String::new(), source: source.clone() };
            let p = raw.matrix(&[name])?;
            if p.ncols() != dim {
                return Err(bad(format!("projection has shape {:?}, expected (_, {dim})", p.dim())));
            }
            Some(p)
        } else {
            None
        };
        if cfg.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidArgument("normalisation std must be positive".into()));
        }

        Ok(Self {
            layout: cfg.layout,
            image_size: cfg.image_size,
            patch,
            grid,
            heads: cfg.heads,
            key_layer: cfg.key_layer,
            act: cfg.activation,
            mean: cfg.mean,
            std: cfg.std,
            patch_embed: Linear { w: patch_w, b: patch_b },
            cls_token,
            pos,
            pre_ln,
            blocks,
            final_ln,
            projection,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn width(&self) -> usize {
        self.cls_token.len()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn projection_dim(&self) -> Option<usize> {
        self.projection.as_ref().map(|p| p.nrows())
    }

    fn check(&self, x: &Image) -> Result<()> {
        check_input_size(Some((self.image_size, self.image_size)), x)?;
        if x.channels() != 3 {
            return Err(Error::InvalidArgument(format!("ViT adapter expects RGB input, got {} channels", x.channels())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Image) -> Result<VitForward> {
        self.check(x)?;
        let p = self.patch;
        let n = self.grid * self.grid;
        let mut patches = Array2::zeros((n, 3 * p * p));
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let mut row = patches.row_mut(gy * self.grid + gx);
                for c in 0..3 {
                    for a in 0..p {
                        for b in 0..p {
                            let v = x.get(gy * p + a, gx * p + b, c);
                            row[(c * p + a) * p + b] = ((v + 1.0) / 2.0 - self.mean[c]) / self.std[c];
                        }
                    }
                }
            }
        }
        let mut h = Array2::zeros((n + 1, self.width()));
        h.row_mut(0).assign(&self.cls_token);
        h.slice_mut(s![1.., ..]).assign(&self.patch_embed.forward(&patches));
        h += &self.pos;
        let pre_ln = self.pre_ln.as_ref().map(|ln| {
            let (y, t) = ln.forward(&h);
            h = y;
            t
        });
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, t) = block.forward(&h, self.heads, self.act);
            traces.push(t);
            h = next;
        }
        let keys = traces[self.key_layer - 1].k.slice(s![1.., ..]).to_owned();
        let (cls, final_ln) = self.final_ln.forward(&h.slice(s![0..1, ..]).to_owned());
        let cls = cls.row(0).to_owned();
        let embedding = self.projection.as_ref().map(|pm| pm.dot(&cls));
        if keys.iter().chain(cls.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ViT forward".into()));
        }
        Ok(VitForward { keys, cls, embedding, pre_ln, blocks: traces, final_ln })
    }

    /// Vector-Jacobian product of `forward` with cotangents on the keys, the
    /// class token and the projected embedding.
    pub fn backward(
        &self,
        fwd: &VitForward,
        d_keys: Option<&Array2<f64>>,
        d_cls: Option<&Array1<f64>>,
        d_embedding: Option<&Array1<f64>>,
    ) -> Result<Image> {
        let n = self.grid * self.grid;
        let d = self.width();
        if let Some(dk) = d_keys {
            if dk.dim() != (n, d) {
                return Err(Error::shape((n, d), dk.dim()));
            }
        }
        let mut dc: Option<Array1<f64>> = d_cls.cloned();
        if let Some(de) = d_embedding {
            let pm = self.projection.as_ref().ok_or_else(|| {
                Error::InvalidArgument("embedding cotangent given to a model without projection".into())
            })?;
            if de.len() != pm.nrows() {
                return Err(Error::shape(pm.nrows(), de.len()));
            }
            let back = pm.t().dot(de);
            dc = Some(match dc {
                Some(c) => c + back,
                None => back,
            });
        }
        if let Some(c) = &dc {
            if c.len() != d {
                return Err(Error::shape(d, c.len()));
            }
        }
        let keys_in = d_keys.map(|dk| {
            let mut full = Array2::zeros((n + 1, d));
            full.slice_mut(s![1.., ..]).assign(dk);
            full
        });

        let mut dh = Array2::zeros((n + 1, d));
        let start = match &dc {
            Some(c) => {
                let row = c.clone().insert_axis(Axis(0));
                dh.row_mut(0).assign(&self.final_ln.backward(&fwd.final_ln, &row).row(0));
                self.blocks.len()
            }
            None if keys_in.is_some() => self.key_layer,
            None => return Ok(Image::zeros(self.image_size, self.image_size, 3)),
        };
        for i in (0..start).rev() {
            let inject = if i + 1 == self.key_layer { keys_in.as_ref() } else { None };
            dh = self.blocks[i].backward(&fwd.blocks[i], &dh, inject, self.act);
        }
        if let (Some(ln), Some(t)) = (&self.pre_ln, &fwd.pre_ln) {
            dh = ln.backward(t, &dh);
        }
        let dp = self.patch_embed.backward(&dh.slice(s![1.., ..]).to_owned());
        let p = self.patch;
        let mut out = Image::zeros(self.image_size, self.image_size, 3);
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let row = dp.row(gy * self.grid + gx);
                for c in 0..3 {
                    let k = 0.5 / self.std[c];
                    for a in 0..p {
                        for b in 0..p {
                            out.set(gy * p + a, gx * p + b, c, row[(c * p + a) * p + b] * k);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Structure keys and semantic token from a pretrained ViT.
#[derive(Debug, Clone)]
pub struct VitExtractor {
    pub model: VitModel,
}

impl VitExtractor {
    pub fn load(cfg: &VitConfig) -> Result<Self> {
        Ok(Self { model: VitModel::load(cfg)? })
    }
}

struct VitPullback<'a> {
    model: &'a VitModel,
    fwd: VitForward,
}

impl FeaturePullback for VitPullback<'_> {
    fn pullback(&self, d_keys: Option<&Array2<f64>>, d_cls: Option<&Array1<f64>>) -> Result<Image> {
        self.model.backward(&self.fwd, d_keys, d_cls, None)
    }
}

impl StructureSemanticExtractor for VitExtractor {
    fn input_size(&self) -> Option<(usize, usize)> {
        Some((self.model.image_size, self.model.image_size))
    }

    fn extract_traced(&self, x: &Image) -> Result<(FeatureBundle, Box<dyn FeaturePullback + '_>)> {
        let fwd = self.model.forward(x)?;
        let bundle = FeatureBundle::new(fwd.keys.clone(), fwd.cls.clone())?;
        Ok((bundle, Box::new(VitPullback { model: &self.model, fwd })))
    }
}

/// One CLIP tower with its table of precomputed text embeddings.
#[derive(Debug, Clone)]
pub struct ClipMember {
    pub model: VitModel,
    texts: HashMap<String, Array1<f64>>,
    table: PathBuf,
}

impl ClipMember {
    pub fn load(cfg: &VitConfig) -> Result<Self> {
        if cfg.layout != Layout::HfClipVision {
            return Err(Error::Checkpoint(format!("{}: CLIP members need the hf_clip_vision layout", cfg.weights.display())));
        }
        let model = VitModel::load(cfg)?;
        let table = cfg.text_embeddings.clone().ok_or_else(|| {
            Error::Checkpoint(format!("{}: text_embeddings table not configured", cfg.weights.display()))
        })?;
        let text = std::fs::read_to_string(&table)
            .map_err(|e| Error::Checkpoint(format!("cannot read text table {}: {e}", table.display())))?;
        let raw: HashMap<String, Vec<f64>> = serde_json::from_str(&text)?;
        let dim = model.projection_dim().unwrap_or(0);
        let mut texts = HashMap::new();
        for (prompt, v) in raw {
            if v.len() != dim {
                return Err(Error::Checkpoint(format!(
                    "{}: embedding for {prompt:?} has {} values, expected {dim}",
                    table.display(),
                    v.len()
                )));
            }
            texts.insert(prompt.trim().to_string(), Array1::from(v));
        }
        Ok(Self { model, texts, table })
    }

    pub fn prompts(&self) -> impl Iterator<Item = &str> {
        self.texts.keys().map(|s| s.as_str())
    }
}

/// Ensemble of CLIP towers; the joint embedding concatenates the members'
/// normalised outputs.
#[derive(Debug, Clone)]
pub struct ClipEmbedder {
    pub members: Vec<ClipMember>,
}

impl ClipEmbedder {
    pub fn new(members: Vec<ClipMember>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::InvalidArgument("empty CLIP ensemble".into()))?;
        let size = first.model.image_size;
        if members.iter().any(|m| m.model.image_size != size) {
            return Err(Error::InvalidArgument("CLIP ensemble members must share one input size".into()));
        }
        Ok(Self { members })
    }

    pub fn load(cfg: &EnsembleConfig) -> Result<Self> {
        Self::new(cfg.members.iter().map(ClipMember::load).collect::<Result<Vec<_>>>()?)
    }
}

struct ClipPullback<'a> {
    emb: &'a ClipEmbedder,
    fwds: Vec<VitForward>,
    parts: Vec<Array1<f64>>,
}

impl VectorPullback for ClipPullback<'_> {
    fn pullback(&self, d: &Array1<f64>) -> Result<Image> {
        let total: usize = self.parts.iter().map(|p| p.len()).sum();
        if d.len() != total {
            return Err(Error::shape(total, d.len()));
        }
        let grads = embed_ensemble_vjp(&self.parts, d);
        let mut out: Option<Image> = None;
        for ((m, fwd), g) in self.emb.members.iter().zip(&self.fwds).zip(&grads) {
            let gi = m.model.backward(fwd, None, None, Some(g))?;
            out = Some(match out {
                Some(mut acc) => {
                    acc.add_scaled(1.0, &gi)?;
                    acc
                }
                None => gi,
            });
        }
        Ok(out.expect("non-empty ensemble"))
    }
}

impl TextImageEmbedder for ClipEmbedder {
    fn input_size(&self) -> Option<(usize, usize)> {
        let s = self.members[0].model.image_size;
        Some((s, s))
    }

    fn embed_dim(&self) -> usize {
        self.members.iter().map(|m| m.model.projection_dim().unwrap_or(0)).sum()
    }

    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVector> {
        let key = prompt.trim();
        if key.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let parts = self
            .members
            .iter()
            .map(|m| {
                m.texts.get(key).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "prompt {key:?} is not in the text table {}; add it with tools/clip_text_table.py",
                        m.table.display()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        embed_ensemble(&parts)
    }

    fn embed_image_traced(&self, x: &Image) -> Result<(EmbeddingVector, Box<dyn VectorPullback + '_>)> {
        let fwds = self.members.iter().map(|m| m.model.forward(x)).collect::<Result<Vec<_>>>()?;
        let parts: Vec<Array1<f64>> = fwds.iter().map(|f| f.embedding.clone().expect("CLIP tower has a projection")).collect();
        let e = embed_ensemble(&parts)?;
        Ok((e, Box::new(ClipPullback { emb: self, fwds, parts })))
    }
}
