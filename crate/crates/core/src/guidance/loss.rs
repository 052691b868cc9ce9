use ndarray::{Array1, Array2, Axis};

use super::{l2, normalize_vjp, EmbeddingVector, FeatureBundle, NORM_EPS};
use crate::par::{self, Parallelism};
use crate::{Error, Image, Result};

/// A loss value together with its gradient with respect to one input.
#[derive(Debug, Clone)]
pub struct ValueGrad<G> {
    pub value: f64,
    pub grad: G,
}

fn check_same<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// Unit-normalises every row. Rows with norm below `1e-12` are rejected.
pub fn normalize_rows(keys: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = keys.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.iter().any(|n| *n < NORM_EPS || !n.is_finite()) {
        return Err(Error::ZeroNorm("key row"));
    }
    let normed = keys / &norms.view().insert_axis(Axis(1));
    Ok((normed, norms))
}

/// Pulls a row-wise gradient back through [`normalize_rows`].
pub fn normalize_rows_vjp(normed: &Array2<f64>, norms: &Array1<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for ((mut o, u), n) in out.rows_mut().into_iter().zip(normed.rows()).zip(norms.iter()) {
        let ug = u.dot(&o);
        o.zip_mut_with(&u, |ov, uv| *ov = (*ov - uv * ug) / n);
    }
    out
}

/// Row-parallel `A·Bᵀ`.
fn gram(a: &Array2<f64>, b: &Array2<f64>, policy: Parallelism) -> Array2<f64> {
    let (n, m) = (a.nrows(), b.nrows());
    let rows = par::map_range(policy, n, |i| {
        let ai = a.row(i);
        (0..m).map(|j| ai.dot(&b.row(j))).collect::<Vec<f64>>()
    });
    Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect()).expect("n×m")
}

/// Cosine self-similarity matrix of the key rows.
pub fn self_similarity(keys: &Array2<f64>) -> Result<Array2<f64>> {
    self_similarity_with(keys, Parallelism::default())
}

pub fn self_similarity_with(keys: &Array2<f64>, policy: Parallelism) -> Result<Array2<f64>> {
    let (normed, _) = normalize_rows(keys)?;
    Ok(gram(&normed, &normed, policy))
}

/// Frobenius distance between key self-similarity matrices, with the
/// gradient with respect to `out_keys`.
pub fn ssim_loss(
    src_keys: &Array2<f64>,
    out_keys: &Array2<f64>,
    policy: Parallelism,
) -> Result<ValueGrad<Array2<f64>>> {
    check_same(src_keys, out_keys)?;
    let s_src = self_similarity_with(src_keys, policy)?;
    let (normed, norms) = normalize_rows(out_keys)?;
    let s_out = gram(&normed, &normed, policy);
    let diff = &s_out - &s_src;
    let value = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if value == 0.0 {
        // not differentiable at the minimum; zero is a valid subgradient
        return Ok(ValueGrad { value, grad: Array2::zeros(out_keys.dim()) });
    }
    let g_s = diff / value;
    let g_n = g_s.dot(&normed) * 2.0;
    Ok(ValueGrad { value, grad: normalize_rows_vjp(&normed, &norms, &g_n) })
}

pub fn l_ssim(src: &FeatureBundle, out: &FeatureBundle) -> Result<f64> {
    Ok(ssim_loss(&src.keys, &out.keys, Parallelism::default())?.value)
}

/// Patch-wise infoNCE over a similarity matrix whose diagonal holds the
/// positive pairs: `Σ_i [logsumexp_j(sim_ij/τ) − sim_ii/τ]`.
pub fn contrastive_from_similarity(sim: &Array2<f64>, tau: f64) -> f64 {
    sim.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
            let lse = m + row.iter().map(|s| (s / tau - m).exp()).sum::<f64>().ln();
            lse - row[i] / tau
        })
        .sum()
}

/// Patch-wise contrastive loss between output and source keys, with the
/// gradient with respect to `out_keys`. Positives share a token position.
pub fn contrastive_loss(
    src_keys: &Array2<f64>,
    out_keys: &Array2<f64>,
    tau: f64,
    policy: Parallelism,
) -> Result<ValueGrad<Array2<f64>>> {
    check_same(src_keys, out_keys)?;
    if out_keys.nrows() < 2 {
        return Err(Error::InvalidArgument("contrastive loss needs at least two tokens".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let (src_n, _) = normalize_rows(src_keys)?;
    let (out_n, out_norms) = normalize_rows(out_keys)?;
    let n = out_n.nrows();
    let d = out_n.ncols();
    // per row: (loss_i, dL/d out_n_i)
    let rows = par::map_range(policy, n, |i| {
        let q = out_n.row(i);
        let logits: Vec<f64> = (0..n).map(|j| q.dot(&src_n.row(j)) / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        let loss = m + s.ln() - logits[i];
        let mut g = vec![0.0; d];
        for j in 0..n {
            let coef = (exps[j] / s - if j == i { 1.0 } else { 0.0 }) / tau;
            if coef != 0.0 {
                for (gk, sk) in g.iter_mut().zip(src_n.row(j).iter()) {
                    *gk += coef * sk;
                }
            }
        }
        (loss, g)
    });
    let mut value = 0.0;
    let mut g_n = Array2::zeros((n, d));
    for (i, (loss, g)) in rows.into_iter().enumerate() {
        value += loss;
        g_n.row_mut(i).assign(&Array1::from(g));
    }
    Ok(ValueGrad { value, grad: normalize_rows_vjp(&out_n, &out_norms, &g_n) })
}

pub fn l_cont(src: &FeatureBundle, out: &FeatureBundle, tau: f64) -> Result<f64> {
    Ok(contrastive_loss(&src.keys, &out.keys, tau, Parallelism::default())?.value)
}

/// Normalises each per-model embedding, concatenates them and renormalises.
pub fn embed_ensemble(parts: &[Array1<f64>]) -> Result<EmbeddingVector> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("empty embedding ensemble".into()));
    }
    let mut joined = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble part".into()));
        }
        let n = l2(p);
        if n < NORM_EPS {
            return Err(Error::ZeroNorm("ensemble part"));
        }
        joined.extend(p.iter().map(|v| v / n));
    }
    EmbeddingVector::unit(Array1::from(joined))
}

/// Pulls a gradient on the ensemble embedding back to the raw parts.
pub fn embed_ensemble_vjp(parts: &[Array1<f64>], g: &Array1<f64>) -> Vec<Array1<f64>> {
    let normed: Vec<Array1<f64>> = parts.iter().map(|p| p / l2(p)).collect();
    let joined = Array1::from(normed.iter().flat_map(|p| p.iter().cloned()).collect::<Vec<_>>());
    let g_joined = normalize_vjp(&joined, g);
    let mut offset = 0;
    parts
        .iter()
        .map(|p| {
            let gp = g_joined.slice(ndarray::s![offset..offset + p.len()]).to_owned();
            offset += p.len();
            normalize_vjp(p, &gp)
        })
        .collect()
}

/// `E_T(d_trg) + λ_i·E_I(x_src) − λ_s·E_T(d_src)`.
pub fn directional_target(
    trg_text: &EmbeddingVector,
    src_img: &EmbeddingVector,
    src_text: &EmbeddingVector,
    lambda_s: f64,
    lambda_i: f64,
) -> Result<Array1<f64>> {
    if trg_text.dim() != src_img.dim() || trg_text.dim() != src_text.dim() {
        return Err(Error::shape(trg_text.dim(), (src_img.dim(), src_text.dim())));
    }
    let v = &trg_text.v + &(&src_img.v * lambda_i) - &(&src_text.v * lambda_s);
    if l2(&v) < NORM_EPS {
        return Err(Error::ZeroNorm("directional CLIP target"));
    }
    Ok(v)
}

/// Mean over views of `−cos(target, view)`, with gradients per view.
pub fn clip_loss(views: &[Array1<f64>], target: &Array1<f64>) -> Result<ValueGrad<Vec<Array1<f64>>>> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no augmented views".into()));
    }
    let nt = l2(target);
    if nt < NORM_EPS {
        return Err(Error::ZeroNorm("directional CLIP target"));
    }
    let t_hat = target / nt;
    let m = views.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(views.len());
    for v in views {
        if v.len() != target.len() {
            return Err(Error::shape(target.len(), v.len()));
        }
        let nv = l2(v);
        if nv < NORM_EPS {
            return Err(Error::ZeroNorm("view embedding"));
        }
        let v_hat = v / nv;
        let cos = t_hat.dot(&v_hat);
        value -= cos / m;
        grads.push((&t_hat - &(&v_hat * cos)) * (-1.0 / (m * nv)));
    }
    Ok(ValueGrad { value, grad: grads })
}

pub fn l_clip(
    out_embs: &[EmbeddingVector],
    trg_text: &EmbeddingVector,
    src_img: &EmbeddingVector,
    src_text: &EmbeddingVector,
    lambda_s: f64,
    lambda_i: f64,
) -> Result<f64> {
    let target = directional_target(trg_text, src_img, src_text, lambda_s, lambda_i)?;
    let views: Vec<Array1<f64>> = out_embs.iter().map(|e| e.v.clone()).collect();
    Ok(clip_loss(&views, &target)?.value)
}

/// Image-mode style loss and its gradients with respect to the output
/// [CLS] token and the output image.
pub struct StyleGrad {
    pub value: f64,
    pub grad_cls: Array1<f64>,
    pub grad_image: Image,
}

/// `‖cls_trg − cls_out‖ + λ_mse·‖x_trg − x‖`, both unnormalised L2 norms.
pub fn style_loss(
    trg_cls: &Array1<f64>,
    out_cls: &Array1<f64>,
    x_trg: &Image,
    x: &Image,
    lambda_mse: f64,
) -> Result<StyleGrad> {
    check_same(trg_cls, out_cls)?;
    x_trg.ensure_same_shape(x)?;
    let dc = out_cls - trg_cls;
    let nc = l2(&dc);
    let grad_cls = if nc > 0.0 { dc / nc } else { Array1::zeros(out_cls.len()) };
    let dx = x.sub(x_trg)?;
    let nx = dx.norm();
    let grad_image = if nx > 0.0 && lambda_mse != 0.0 {
        dx.scale(lambda_mse / nx)
    } else {
        Image::zeros(x.height(), x.width(), x.channels())
    };
    Ok(StyleGrad { value: nc + lambda_mse * nx, grad_cls, grad_image })
}

pub fn l_sty(trg: &FeatureBundle, out: &FeatureBundle, x_trg: &Image, x: &Image, lambda_mse: f64) -> Result<f64> {
    Ok(style_loss(&trg.cls, &out.cls, x_trg, x, lambda_mse)?.value)
}

/// `−‖cls_now − cls_prev‖` with its gradient with respect to `cls_now`.
pub fn semantic_divergence(now: &Array1<f64>, prev: &Array1<f64>) -> Result<ValueGrad<Array1<f64>>> {
    check_same(now, prev)?;
    let d = now - prev;
    let n = l2(&d);
    let grad = if n > 0.0 { d / -n } else { Array1::zeros(now.len()) };
    Ok(ValueGrad { value: -n, grad })
}

pub fn l_sem(cls_now: &Array1<f64>, cls_prev: &Array1<f64>) -> Result<f64> {
    Ok(semantic_divergence(cls_now, cls_prev)?.value)
}

/// Mean squared violation of the `[-1, 1]` range.
pub fn range_loss(x: &Image) -> ValueGrad<Image> {
    let n = x.len().max(1) as f64;
    let mut value = 0.0;
    let grad = x.map(|v| {
        let over = (v.abs() - 1.0).max(0.0);
        2.0 * over * v.signum() / n
    });
    for v in x.as_slice() {
        let over = (v.abs() - 1.0).max(0.0);
        value += over * over;
    }
    ValueGrad { value: value / n, grad }
}

pub fn l_rng(x: &Image) -> f64 {
    range_loss(x).value
}
