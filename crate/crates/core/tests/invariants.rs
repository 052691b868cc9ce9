use ndarray::{Array1, Array2};
use proptest::prelude::*;
use semtrans::color::color_match;
use semtrans::extractors::{StructureSemanticExtractor, ToyEmbedder, ToyPatchExtractor};
use semtrans::guidance::{
    embed_ensemble, l2, l_cont, l_rng, l_ssim, self_similarity, FeatureBundle, GuidanceTask, GuidanceWeights,
    Objective,
};
use semtrans::metrics::{feature_stats_with, sfid, FeatureStats};
use semtrans::rng::NoiseStream;
use semtrans::sampler::{guided_step, init_start, resample_at_start, SamplerConfig};
use semtrans::score::{GaussianScore, ScoreModel};
use semtrans::toy::{iou, train_score_model, ShapeSpec, ToyDataset, TOY_SIZE};
use semtrans::{Image, NoiseSchedule, Parallelism, VarianceRule};

fn image(seed: u64, h: usize, w: usize, c: usize, scale: f64) -> Image {
    NoiseStream::new(seed).gaussian(h, w, c).scale(scale)
}

fn keys(seed: u64, n: usize, d: usize) -> Array2<f64> {
    let x = image(seed, n, d, 1, 1.0);
    Array2::from_shape_vec((n, d), x.as_slice().to_vec()).unwrap().mapv(|v| v + 0.1)
}

fn stats(seed: u64, d: usize) -> FeatureStats {
    let mut rng = NoiseStream::new(seed);
    FeatureStats {
        n: 5,
        mu: Array1::from_shape_fn(d, |_| rng.normal()),
        var_diag: Array1::from_shape_fn(d, |_| rng.uniform_in(0.01, 3.0)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tweedie_inverts_q_sample(seed in any::<u64>(), t in 1usize..=1000) {
        let s = NoiseSchedule::standard(VarianceRule::Beta);
        let x0 = image(seed, 3, 4, 3, 0.8);
        let eps = image(seed ^ 1, 3, 4, 3, 1.0);
        let back = s.tweedie_x0(&s.q_sample(&x0, t, &eps).unwrap(), t, &eps).unwrap();
        prop_assert!(back.sub(&x0).unwrap().norm() <= 1e-6);
    }

    #[test]
    fn respaced_alpha_bars_decrease(n in 1usize..=1000) {
        let s = NoiseSchedule::standard(VarianceRule::Beta).respaced(n).unwrap();
        prop_assert_eq!(s.len(), n);
        let ab = s.alpha_bars();
        prop_assert!(ab.iter().all(|v| *v > 0.0 && *v < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.sigmas().iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn self_similarity_is_symmetric_with_unit_diagonal(seed in any::<u64>(), n in 2usize..12, d in 1usize..6) {
        let sim = self_similarity(&keys(seed, n, d)).unwrap();
        for i in 0..n {
            prop_assert!((sim[[i, i]] - 1.0).abs() < 1e-9);
            for j in 0..n {
                prop_assert!((sim[[i, j]] - sim[[j, i]]).abs() < 1e-12);
                prop_assert!(sim[[i, j]].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn structure_losses_ignore_key_scale(seed in any::<u64>(), a in 0.1f64..10.0, b in 0.1f64..10.0) {
        let src = keys(seed, 6, 3);
        let out = keys(seed ^ 7, 6, 3);
        let cls = Array1::zeros(2);
        let bundle = |k: Array2<f64>| FeatureBundle::new(k, cls.clone()).unwrap();
        let c0 = l_cont(&bundle(src.clone()), &bundle(out.clone()), 0.5).unwrap();
        let c1 = l_cont(&bundle(&src * a), &bundle(&out * b), 0.5).unwrap();
        prop_assert!((c0 - c1).abs() < 1e-9);
        let s0 = l_ssim(&bundle(src.clone()), &bundle(out.clone())).unwrap();
        let s1 = l_ssim(&bundle(&src * a), &bundle(&out * b)).unwrap();
        prop_assert!((s0 - s1).abs() < 1e-9);
        prop_assert!(l_ssim(&bundle(src.clone()), &bundle(src)).unwrap() < 1e-12);
    }

    #[test]
    fn range_loss_vanishes_inside_the_box(seed in any::<u64>()) {
        let x = image(seed, 4, 4, 3, 1.0).map(|v| v.tanh());
        prop_assert_eq!(l_rng(&x), 0.0);
        prop_assert!(l_rng(&x.scale(3.0)) >= 0.0);
    }

    #[test]
    fn ensemble_embedding_is_unit(seed in any::<u64>(), members in 1usize..5) {
        let mut rng = NoiseStream::new(seed);
        let parts: Vec<Array1<f64>> = (0..members).map(|_| Array1::from_shape_fn(4, |_| rng.normal() + 0.01)).collect();
        let e = embed_ensemble(&parts).unwrap();
        prop_assert_eq!(e.v.len(), 4 * members);
        prop_assert!((l2(&e.v) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sfid_is_symmetric_and_non_negative(sa in any::<u64>(), sb in any::<u64>(), d in 1usize..8) {
        let (a, b) = (stats(sa, d), stats(sb, d));
        let ab = sfid(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - sfid(&b, &a).unwrap()).abs() < 1e-12 * (1.0 + ab));
        prop_assert_eq!(sfid(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn feature_stats_policy_independent(seed in any::<u64>(), n in 2usize..300, d in 1usize..5) {
        let x = keys(seed, n, d);
        let a = feature_stats_with(&x, Parallelism::Sequential).unwrap();
        let b = feature_stats_with(&x, Parallelism::Parallel).unwrap();
        prop_assert_eq!(&a, &b);
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
        prop_assert!((&a.mu - &mean).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 16), b in proptest::collection::vec(any::<bool>(), 16)) {
        let x = iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, iou(&b, &a).unwrap());
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn color_match_stays_in_range(seed in any::<u64>()) {
        let x = image(seed, 5, 5, 3, 0.6).clamp(-1.0, 1.0);
        let r = image(seed ^ 3, 6, 4, 3, 0.3).clamp(-1.0, 1.0);
        let y = color_match(&x, &r).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

#[test]
fn init_start_mean_matches_forward_marginal() {
    let s = SamplerConfig::text_defaults().schedule().unwrap();
    let t = 60;
    let ab = s.alpha_bar(t).unwrap();
    let src = Image::filled(1, 1, 1, 0.7);
    let draws: Vec<f64> = (0..10_000).map(|seed| init_start(&src, &s, t, seed).unwrap().as_slice()[0]).collect();
    let (m, _) = moments(&draws);
    let se = ((1.0 - ab) / draws.len() as f64).sqrt();
    assert!((m - ab.sqrt() * 0.7).abs() <= 3.0 * se, "{m} vs {}", ab.sqrt() * 0.7);
}

#[test]
fn deterministic_limit_preserves_gaussian_mean() {
    // σ = 0 everywhere and the exact noise prediction
    let s = NoiseSchedule::standard(VarianceRule::Beta).respaced(100).unwrap();
    let m = image(4, 3, 3, 3, 0.4);
    let score = GaussianScore::new(m.clone(), 0.1);
    let mut x = m.scale(s.alpha_bar(s.len()).unwrap().sqrt());
    for t in (1..=s.len()).rev() {
        let eps = score.predict_eps(&x, s.level(t).unwrap()).unwrap();
        x = s.posterior_mean(&x, t, &eps).unwrap();
    }
    assert!(x.sub(&m).unwrap().as_slice().iter().all(|v| v.abs() <= 1e-3));
}

#[test]
fn unguided_resampling_preserves_the_marginal() {
    let cfg = SamplerConfig { resample: 10, ..SamplerConfig::text_defaults() };
    let s = cfg.schedule().unwrap();
    let t = cfg.t_start();
    let ab = s.alpha_bar(t).unwrap();
    let (mu, std) = (0.3, 0.1);
    let score = GaussianScore::new(Image::filled(100, 100, 1, mu), std);
    let (m_true, v_true) = (ab.sqrt() * mu, ab * std * std + 1.0 - ab);
    let x = NoiseStream::new(5).gaussian(100, 100, 1).scale(v_true.sqrt()).map(|v| v + m_true);
    let (out, record) = resample_at_start(&x, &s, &score, None, &cfg).unwrap();
    assert_eq!(record.steps.len(), 10);
    let (m, v) = moments(out.as_slice());
    let n = out.len() as f64;
    assert!((m - m_true).abs() <= 3.0 * (v_true / n).sqrt(), "mean {m} vs {m_true}");
    assert!((v - v_true).abs() <= 3.0 * v_true * (2.0 / (n - 1.0)).sqrt(), "var {v} vs {v_true}");
}

#[test]
fn semantic_term_alone_keeps_cls_moving() {
    let data = ToyDataset::generate(20, 0.02, 7);
    let model = train_score_model(&data, 0).unwrap();
    let ex = ToyPatchExtractor::new(1).unwrap();
    let emb = ToyEmbedder::default();
    let mut rng = NoiseStream::new(99);
    let src = ShapeSpec::random(&mut rng, TOY_SIZE).render(TOY_SIZE, 0, 0.02, &mut rng);
    let task = GuidanceTask::text(src.clone(), "blue", "red");
    let weights = GuidanceWeights { lambda_sem: GuidanceWeights::default().lambda_sem, ..GuidanceWeights::zero() };
    let obj = Objective::new(&task, weights, &ex, Some(&emb), None).unwrap();
    let cfg = SamplerConfig::text_defaults();
    let s = cfg.schedule().unwrap();
    let mut noise = NoiseStream::new(1);
    let mut x = init_start(&src, &s, cfg.t_start(), 0).unwrap();
    let mut prev: Option<Array1<f64>> = None;
    let mut cls_hist = Vec::new();
    for (k, t) in (1..=cfg.t_start()).rev().take(6).enumerate() {
        let z = noise.gaussian_like(&x);
        let out = guided_step(&x, t, &s, &model, Some(&obj), prev.as_ref(), &z, k as u64, true).unwrap();
        cls_hist.push(ex.extract(&out.x0_hat).unwrap().cls);
        prev = Some(out.cls);
        x = out.x;
    }
    let dist: Vec<f64> = cls_hist.windows(2).map(|w| l2(&(&w[1] - &w[0]))).collect();
    assert!(dist.windows(2).all(|w| w[1] >= w[0]), "{dist:?}");
}
