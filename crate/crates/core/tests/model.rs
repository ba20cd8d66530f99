mod common;

use std::sync::Arc;

use clickprobe::clicks::{Click, ClickState};
use clickprobe::model::{
    ClickEncoderConfig, ClickEncoderKind, HeadConfig, HeadKind, InjectionMode, MiniVitConfig, ModelConfig, ProbeModel,
};
use clickprobe::tensor::{GradCheck, Graph, Tensor};
use clickprobe::upsample::{FeatureMap, UpsamplerKind};
use clickprobe::Error;
use rand::Rng;

fn tiny(head: HeadKind, injection: InjectionMode, up: UpsamplerKind, enc: ClickEncoderKind) -> ModelConfig {
    ModelConfig {
        backbone: MiniVitConfig { patch: 4, dim: 8, depth: 1, heads: 2, mlp_ratio: 2, seed: 11 },
        encoder: ClickEncoderConfig { kind: enc, dim: 8, depth: 1, heads: 2 },
        head: HeadConfig { kind: head, inner_dim: 5, fpn_channels: 2, multiscale_dim: 3 },
        injection,
        upsampler: up,
        ..Default::default()
    }
}

fn image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut r = common::rng(seed);
    Tensor::uniform(vec![3, h, w], 0.0, 1.0, &mut r)
}

fn clicks(h: usize, w: usize) -> ClickState {
    let mut s = ClickState::new(h, w);
    s.push(Click::new(h / 2, w / 2, true)).unwrap();
    s.push(Click::new(1, 1, false)).unwrap();
    s.set_prev_prob(&vec![0.3; h * w]).unwrap();
    s
}

/// Give zero-initialized parameters random values so every path carries gradient.
fn randomize<T: clickprobe::tensor::Float>(m: &mut ProbeModel<T>, seed: u64) {
    let mut r = common::rng(seed);
    for p in m.trainable_mut() {
        p.value = Tensor::uniform(p.value.shape().to_vec(), -0.5, 0.5, &mut r);
    }
}

fn all_kinds() -> Vec<(HeadKind, InjectionMode, UpsamplerKind, ClickEncoderKind)> {
    let mut out = Vec::new();
    for up in [UpsamplerKind::LowresIdentity, UpsamplerKind::Bilinear, UpsamplerKind::Nearest, UpsamplerKind::Jbu] {
        for inj in [InjectionMode::Early, InjectionMode::Late, InjectionMode::SeparateUpsample] {
            for head in [HeadKind::Linear, HeadKind::SimpleConv, HeadKind::Conv, HeadKind::Multiscale] {
                if head == HeadKind::Multiscale && up == UpsamplerKind::LowresIdentity {
                    continue;
                }
                out.push((head, inj, up.clone(), ClickEncoderKind::PatchEmbed));
            }
        }
    }
    out.push((HeadKind::Conv, InjectionMode::Early, UpsamplerKind::Jbu, ClickEncoderKind::SimpleVit));
    out.push((HeadKind::Linear, InjectionMode::Late, UpsamplerKind::Bilinear, ClickEncoderKind::SimpleVit));
    out
}

#[test]
fn zero_injection_matches_plain_backbone_bitwise() {
    let m = ProbeModel::<f32>::new(tiny(HeadKind::Conv, InjectionMode::Early, UpsamplerKind::Bilinear, ClickEncoderKind::PatchEmbed))
        .unwrap();
    let img = image(1, 12, 16);
    let mut g = Graph::inference();
    let x = g.constant(img.clone());
    let plain = m.minivit_forward(&mut g, x, None).unwrap();
    let zero = g.constant(Tensor::zeros(vec![8, 3, 4]));
    let injected = m.minivit_forward(&mut g, x, Some(zero)).unwrap();
    let (a, b) = (g.value(plain).data(), g.value(injected).data());
    assert!(a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn default_backbone_emits_96_channels_on_a_16_grid() {
    let m = ProbeModel::<f32>::new(ModelConfig::default()).unwrap();
    let f = m.backbone_features(&image(2, 224, 224)).unwrap();
    assert_eq!(f.data.shape(), &[96, 16, 16]);
    assert_eq!(f.stride, 14);
    assert!(f.data.all_finite());
}

#[test]
fn injected_features_gradient_matches_finite_differences() {
    let m = ProbeModel::<f64>::new(tiny(HeadKind::Conv, InjectionMode::Early, UpsamplerKind::Jbu, ClickEncoderKind::PatchEmbed))
        .unwrap();
    let img: Tensor<f64> = image(3, 8, 12).lift();
    for seed in 0..3 {
        let mut r = common::rng(seed);
        let inj = common::rand_tensor(&[8, 2, 3], &mut r);
        let report = GradCheck { seed, ..GradCheck::default() }
            .run(
                |g, v| {
                    let x = g.constant(img.clone());
                    m.minivit_forward(g, x, Some(v))
                },
                &inj,
            )
            .unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

/// Loss used for parameter checks: a fixed weighting of the logits.
fn weighted_logit_sum(m: &ProbeModel<f64>, img: &Tensor<f32>, state: &ClickState, weights: &Arc<Vec<f64>>) -> (f64, Option<clickprobe::tensor::Gradients<f64>>) {
    let ctx = m.prepare(img, None).unwrap();
    let mut g = Graph::new();
    let logits = m.forward(&mut g, &ctx, state).unwrap();
    let loss = g.weighted_sum(logits, Arc::clone(weights)).unwrap();
    let value = g.value(loss).item().unwrap();
    (value, Some(g.backward(loss).unwrap()))
}

fn check_params(cfg: ModelConfig, prefixes: &[&str]) {
    let (h, w) = (8, 12);
    let mut m = ProbeModel::<f64>::new(cfg).unwrap();
    randomize(&mut m, 5);
    let img = image(4, h, w);
    let state = clicks(h, w);
    let mut r = common::rng(9);
    let weights: Arc<Vec<f64>> = Arc::new((0..h * w).map(|_| r.random_range(-1.0..1.0)).collect());
    let (_, grads) = weighted_logit_sum(&m, &img, &state, &weights);
    let grads = grads.unwrap();
    let names: Vec<String> = m
        .trainable()
        .map(|p| p.name.clone())
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .collect();
    assert!(!names.is_empty());
    for name in names {
        let analytic = grads.by_name(&name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let x: Vec<f64> = m.param(&name).unwrap().value.data().to_vec();
        let shape = m.param(&name).unwrap().value.shape().to_vec();
        // The 2-channel pyramid norms are sharply curved; a small step keeps
        // central-difference truncation error far below the tolerance.
        let report = GradCheck { step: 1e-5, ..GradCheck::default() }
            .sampled(12)
            .compare(
                analytic.data(),
                |v| {
                    let mut probe = m.clone();
                    let p = probe.trainable_mut().find(|p| p.name == name).unwrap();
                    p.value = Tensor::new(shape.clone(), v.to_vec()).unwrap();
                    Ok(weighted_logit_sum(&probe, &img, &state, &weights).0)
                },
                &x,
            )
            .unwrap();
        assert!(report.passed, "{name}: {report:?}");
    }
}

#[test]
fn encoder_and_head_gradients_match_finite_differences() {
    check_params(
        tiny(HeadKind::Conv, InjectionMode::Early, UpsamplerKind::Jbu, ClickEncoderKind::PatchEmbed),
        &["encoder.", "head."],
    );
    check_params(
        tiny(HeadKind::SimpleConv, InjectionMode::SeparateUpsample, UpsamplerKind::Jbu, ClickEncoderKind::SimpleVit),
        &["encoder.", "head."],
    );
}

#[test]
fn pyramid_and_multiscale_gradients_match_finite_differences() {
    check_params(
        tiny(HeadKind::Multiscale, InjectionMode::Late, UpsamplerKind::Bilinear, ClickEncoderKind::PatchEmbed),
        &["head.fpn.", "head.ms.", "head.fuse", "encoder."],
    );
}

#[test]
fn first_click_matches_clickless_forward_at_init() {
    for enc in [ClickEncoderKind::PatchEmbed, ClickEncoderKind::SimpleVit] {
        for inj in [InjectionMode::Early, InjectionMode::Late, InjectionMode::SeparateUpsample] {
            let m = ProbeModel::<f32>::new(tiny(HeadKind::Conv, inj, UpsamplerKind::Jbu, enc)).unwrap();
            let img = image(6, 12, 12);
            let ctx = m.prepare(&img, None).unwrap();
            let none = m.predict(&ctx, &ClickState::new(12, 12)).unwrap();
            let one = m.predict(&ctx, &clicks(12, 12)).unwrap();
            assert_eq!(none, one, "{enc:?} {inj:?}");
        }
    }
}

#[test]
fn logits_cover_the_image_for_every_configuration() {
    for (head, inj, up, enc) in all_kinds() {
        let mut m = ProbeModel::<f32>::new(tiny(head, inj, up.clone(), enc)).unwrap();
        randomize(&mut m, 1);
        let img = image(7, 10, 13);
        let ctx = m.prepare(&img, None).unwrap();
        let mut g = Graph::new();
        let logits = m.forward(&mut g, &ctx, &clicks(10, 13)).unwrap();
        assert_eq!(g.shape(logits), &[1, 10, 13], "{head:?} {inj:?} {up} {enc:?}");
        assert!(g.value(logits).all_finite());
    }
}

#[test]
fn encoder_receives_gradient() {
    for (head, inj, up, enc) in all_kinds() {
        let m = ProbeModel::<f32>::new(tiny(head, inj, up.clone(), enc)).unwrap();
        let img = image(8, 8, 8);
        let ctx = m.prepare(&img, None).unwrap();
        let mut g = Graph::new();
        let logits = m.forward(&mut g, &ctx, &clicks(8, 8)).unwrap();
        let loss = g.bce_with_logits(logits, &vec![true; 64]).unwrap();
        let grads = g.backward(loss).unwrap();
        let name = match enc {
            ClickEncoderKind::PatchEmbed => "encoder.patch.w",
            ClickEncoderKind::SimpleVit => "encoder.proj.w",
        };
        let gw = grads.by_name(name).unwrap();
        assert!(gw.data().iter().any(|v| *v != 0.0), "{head:?} {inj:?} {up} {enc:?}");
        assert!(grads.by_name("backbone.patch.w").is_none());
    }
}

#[test]
fn multiscale_pyramid_shapes_and_constant_input() {
    let m = ProbeModel::<f64>::new(tiny(HeadKind::Multiscale, InjectionMode::Late, UpsamplerKind::Jbu, ClickEncoderKind::PatchEmbed))
        .unwrap();
    let mut g = Graph::new();
    let dense = g.constant(Tensor::full(vec![8, 16, 16], 0.5));
    let quarter = g.constant(Tensor::full(vec![8, 4, 4], 0.5));
    let tokens = g.constant(Tensor::full(vec![8, 4, 4], 0.5));
    let pyr = m.build_fpn(&mut g, dense, quarter, tokens).unwrap();
    let shapes: Vec<Vec<usize>> = pyr.iter().map(|v| g.shape(*v).to_vec()).collect();
    assert_eq!(shapes, vec![vec![2, 16, 16], vec![4, 4, 4], vec![8, 4, 4], vec![16, 2, 2]]);

    let levels = [
        g.constant(Tensor::full(vec![2, 16, 16], 0.25)),
        g.constant(Tensor::full(vec![4, 4, 4], -0.5)),
        g.constant(Tensor::full(vec![8, 4, 4], 1.0)),
        g.constant(Tensor::full(vec![16, 2, 2], 2.0)),
    ];
    let out = m.multiscale_head(&mut g, &levels).unwrap();
    let v = g.value(out);
    assert_eq!(v.shape(), &[1, 16, 16]);
    assert!(v.data().iter().all(|x| (x - v.data()[0]).abs() < 1e-12));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probe.tnsr");
    let mut m = ProbeModel::<f32>::new(tiny(HeadKind::SimpleConv, InjectionMode::Late, UpsamplerKind::Jbu, ClickEncoderKind::SimpleVit))
        .unwrap();
    randomize(&mut m, 3);
    m.save(&path).unwrap();
    let back = ProbeModel::<f32>::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.export_params(), m.export_params());

    let mut other = ProbeModel::<f32>::new(tiny(HeadKind::Linear, InjectionMode::Late, UpsamplerKind::Jbu, ClickEncoderKind::PatchEmbed))
        .unwrap();
    assert!(matches!(other.load_params(&m.export_params()), Err(Error::Format(_))));
}

#[test]
fn ingested_features_feed_late_injection() {
    let mut cfg = tiny(HeadKind::Conv, InjectionMode::SeparateUpsample, UpsamplerKind::Ingested("ext".into()), ClickEncoderKind::PatchEmbed);
    cfg.ingested_channels = Some(6);
    let m = ProbeModel::<f32>::new(cfg).unwrap();
    let img = image(10, 10, 9);
    let feats = FeatureMap::ingested(image(11, 6, 1).reshape(vec![6, 3, 1]).unwrap());
    assert!(matches!(m.prepare(&img, Some(&feats)), Err(Error::Ingestion(_))));
    let mut r = common::rng(2);
    let feats = FeatureMap::ingested(Tensor::uniform(vec![6, 10, 9], -1.0, 1.0, &mut r));
    let ctx = m.prepare(&img, Some(&feats)).unwrap();
    assert_eq!(m.predict(&ctx, &clicks(10, 9)).unwrap().len(), 90);
    assert!(matches!(m.prepare(&img, None), Err(Error::Ingestion(_))));
    let wrong = FeatureMap::ingested(Tensor::zeros(vec![5, 10, 9]));
    assert!(matches!(m.prepare(&img, Some(&wrong)), Err(Error::Ingestion(_))));
}
