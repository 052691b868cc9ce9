//! Pretrained adapters against reference outputs from transformers
//! (tiny random-weight models, see tools/make_vit_fixtures.py).

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use semtrans::extractors::{
    ClipEmbedder, EnsembleConfig, StructureSemanticExtractor, TextImageEmbedder, VitConfig, VitExtractor, VitModel,
};
use semtrans::rng::NoiseStream;
use semtrans::Image;
use serde::Deserialize;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(Deserialize)]
struct ModelRef {
    keys: Vec<f64>,
    keys_shape: Vec<usize>,
    out: Vec<f64>,
    d_keys: Vec<f64>,
    d_out: Vec<f64>,
    grad: Vec<f64>,
}

#[derive(Deserialize)]
struct Reference {
    image: Vec<f64>,
    size: usize,
    vit: ModelRef,
    clip: ModelRef,
}

fn reference() -> (Reference, Image) {
    let text = std::fs::read_to_string(fixture("vit_reference.json")).unwrap();
    let r: Reference = serde_json::from_str(&text).unwrap();
    let x = Image::from_vec(r.size, r.size, 3, r.image.clone()).unwrap();
    (r, x)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn check_model(model: &VitModel, x: &Image, r: &ModelRef, projected: bool) {
    let fwd = model.forward(x).unwrap();
    assert_eq!(vec![fwd.keys.nrows(), fwd.keys.ncols()], r.keys_shape);
    assert!(max_rel(fwd.keys.as_slice().unwrap(), &r.keys) < 1e-9);
    let out = if projected { fwd.embedding.clone().unwrap() } else { fwd.cls.clone() };
    assert!(max_rel(out.as_slice().unwrap(), &r.out) < 1e-9);

    let dk = Array2::from_shape_vec(fwd.keys.dim(), r.d_keys.clone()).unwrap();
    let dout = Array1::from(r.d_out.clone());
    let grad = if projected {
        model.backward(&fwd, Some(&dk), None, Some(&dout)).unwrap()
    } else {
        model.backward(&fwd, Some(&dk), Some(&dout), None).unwrap()
    };
    assert!(max_rel(grad.as_slice(), &r.grad) < 1e-9, "gradient rel err {}", max_rel(grad.as_slice(), &r.grad));
}

#[test]
fn vit_matches_transformers() {
    let (r, x) = reference();
    let cfg = VitConfig::load(&fixture("vit_tiny.json")).unwrap();
    let model = VitModel::load(&cfg).unwrap();
    assert_eq!((model.width(), model.depth()), (16, 3));
    check_model(&model, &x, &r.vit, false);
}

#[test]
fn legacy_vit_naming_loads_the_same_model() {
    let (r, x) = reference();
    let mut cfg = VitConfig::load(&fixture("vit_tiny.json")).unwrap();
    cfg.weights = fixture("vit_tiny_legacy.safetensors");
    check_model(&VitModel::load(&cfg).unwrap(), &x, &r.vit, false);
}

#[test]
fn clip_tower_matches_transformers() {
    let (r, x) = reference();
    let cfg = EnsembleConfig::load(&fixture("clip_tiny.json")).unwrap();
    let model = VitModel::load(&cfg.members[0]).unwrap();
    assert_eq!(model.projection_dim(), Some(12));
    check_model(&model, &x, &r.clip, true);
}

#[test]
fn extractor_is_deterministic_and_checks_size() {
    let (_, x) = reference();
    let ex = VitExtractor::load(&VitConfig::load(&fixture("vit_tiny.json")).unwrap()).unwrap();
    assert_eq!(ex.input_size(), Some((32, 32)));
    let a = ex.extract(&x).unwrap();
    let b = ex.extract(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.keys.dim(), (16, 16));
    assert!(ex.extract(&Image::zeros(31, 32, 3)).is_err());
    assert!(ex.extract(&Image::zeros(32, 32, 1)).is_err());
}

#[test]
fn extractor_pullback_matches_finite_differences() {
    let ex = VitExtractor::load(&VitConfig::load(&fixture("vit_tiny.json")).unwrap()).unwrap();
    let mut rng = NoiseStream::new(5);
    let x = rng.gaussian(32, 32, 3).scale(0.4);
    let (bundle, pb) = ex.extract_traced(&x).unwrap();
    let rk = rng.gaussian(bundle.keys.nrows(), bundle.keys.ncols(), 1);
    let rk = Array2::from_shape_vec(bundle.keys.dim(), rk.as_slice().to_vec()).unwrap();
    let rc = Array1::from(rng.gaussian(1, bundle.cls.len(), 1).as_slice().to_vec());
    let f = |img: &Image| {
        let b = ex.extract(img).unwrap();
        (&b.keys * &rk).sum() + b.cls.dot(&rc)
    };
    let g = pb.pullback(Some(&rk), Some(&rc)).unwrap();
    let h = 1e-5;
    for idx in [0, 17, 400, 1500, 3071] {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut()[idx] += h;
        xm.as_slice_mut()[idx] -= h;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        let an = g.as_slice()[idx];
        assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{idx}: fd {fd} vs {an}");
    }
}

#[test]
fn keys_only_pullback_skips_upper_blocks_consistently() {
    let ex = VitExtractor::load(&VitConfig::load(&fixture("vit_tiny.json")).unwrap()).unwrap();
    let x = NoiseStream::new(8).gaussian(32, 32, 3).scale(0.3);
    let (bundle, pb) = ex.extract_traced(&x).unwrap();
    let dk = Array2::from_elem(bundle.keys.dim(), 0.1);
    let zero_cls = Array1::zeros(bundle.cls.len());
    let a = pb.pullback(Some(&dk), None).unwrap();
    let b = pb.pullback(Some(&dk), Some(&zero_cls)).unwrap();
    assert!(a.sub(&b).unwrap().norm() < 1e-12 * (1.0 + a.norm()));
    assert_eq!(pb.pullback(None, None).unwrap().norm(), 0.0);
}

#[test]
fn clip_embedder_text_table_and_gradient() {
    let emb = ClipEmbedder::load(&EnsembleConfig::load(&fixture("clip_tiny.json")).unwrap()).unwrap();
    assert_eq!(emb.embed_dim(), 12);
    let t = emb.embed_text("  a red shape ").unwrap();
    assert!((t.v.dot(&t.v) - 1.0).abs() < 1e-12);
    let err = emb.embed_text("a green shape").unwrap_err().to_string();
    assert!(err.contains("a green shape"), "{err}");
    assert!(emb.embed_text("   ").is_err());

    let mut rng = NoiseStream::new(9);
    let x = rng.gaussian(32, 32, 3).scale(0.4);
    let (e, pb) = emb.embed_image_traced(&x).unwrap();
    let d = Array1::from(rng.gaussian(1, 12, 1).as_slice().to_vec());
    let g = pb.pullback(&d).unwrap();
    let f = |img: &Image| emb.embed_image(img).unwrap().v.dot(&d);
    assert!((f(&x) - e.v.dot(&d)).abs() < 1e-14);
    let h = 1e-5;
    for idx in [3, 999, 2048] {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut()[idx] += h;
        xm.as_slice_mut()[idx] -= h;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        assert!((fd - g.as_slice()[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "{idx}");
    }
}

#[test]
fn missing_checkpoint_names_the_file() {
    let mut cfg = VitConfig::load(&fixture("vit_tiny.json")).unwrap();
    cfg.weights = fixture("nope.safetensors");
    let err = VitModel::load(&cfg).unwrap_err().to_string();
    assert!(err.contains("nope.safetensors"), "{err}");
    let mut cfg = VitConfig::load(&fixture("vit_tiny.json")).unwrap();
    cfg.key_layer = 9;
    assert!(VitModel::load(&cfg).is_err());
    cfg.key_layer = 2;
    cfg.image_size = 40;
    assert!(VitModel::load(&cfg).is_err());
}
