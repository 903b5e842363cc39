use std::time::Instant;

use ogi_core::bg::{BgMethod, Encoding, Provenance};
use ogi_core::gasnet::{build, frames_to_tensor, train, FrameSet, GasNetVariant, TrainConfig, TrainedModel};
use ogi_core::nn::gradcheck::{grad_check, GradCheckConfig};
use ogi_core::nn::{LayerSpec, Tensor};
use ogi_core::rng::Rng;
use ogi_core::Frame;

/// Parameter count from first principles: 3x3 convs with bias, batch norm
/// (gamma, beta) after each pool, dense layers with bias.
fn expected_params(variant: GasNetVariant, h: usize, w: usize) -> usize {
    let (mut c, mut h, mut w) = (1, h, w);
    let mut n = 0;
    for &f in variant.blocks() {
        n += f * c * 9 + f + 2 * f;
        c = f;
        h /= 2;
        w /= 2;
    }
    let mut fan_in = c * h * w;
    for &k in variant.hidden().iter().chain(&[2]) {
        n += fan_in * k + k;
        fan_in = k;
    }
    n
}

#[test]
fn parameter_counts_follow_the_architecture() {
    for v in GasNetVariant::ALL {
        let net = build::<f32>(v, 120, 160, 0.5, 1).unwrap();
        assert_eq!(net.param_count(), expected_params(v, 120, 160), "{}", v.name());
    }
    // Full-resolution GasNet-2: 8 maps of 60x80 feed the 2400-wide layer.
    assert_eq!(expected_params(GasNetVariant::GasNet2, 240, 320), 92_239_658);
    let specs = GasNetVariant::GasNet3.layer_specs(0.5);
    let convs = specs.iter().filter(|s| matches!(s, LayerSpec::Conv2d { .. })).count();
    assert_eq!(convs, 4);
    let g1 = GasNetVariant::GasNet1.layer_specs(0.5);
    assert_eq!(g1.iter().filter(|s| matches!(s, LayerSpec::Conv2d { .. })).count(), 1);
    assert_eq!(g1.iter().filter(|s| matches!(s, LayerSpec::Dense { .. })).count(), 2);
}

#[test]
fn gasnet3_final_map_at_full_resolution() {
    let net = build::<f32>(GasNetVariant::GasNet3, 240, 320, 0.5, 1).unwrap();
    let flat = net
        .specs
        .iter()
        .position(|s| matches!(s, LayerSpec::Flatten))
        .unwrap();
    assert_eq!(net.shapes[flat], vec![32, 15, 20]);
}

#[test]
fn inputs_too_small_for_the_pool_stack_are_rejected() {
    assert!(build::<f32>(GasNetVariant::GasNet3, 8, 64, 0.5, 1).is_err());
    assert!(build::<f32>(GasNetVariant::GasNet3, 16, 16, 0.5, 1).is_ok());
}

#[test]
fn variants_pass_gradient_check_on_small_inputs() {
    let start = Instant::now();
    let mut rng = Rng::new(21);
    let x = Tensor::new(vec![4, 1, 24, 32], (0..4 * 24 * 32).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
    for v in GasNetVariant::ALL {
        let net = build::<f64>(v, 24, 32, 0.5, 3).unwrap();
        let report = grad_check(&net, &x, &[0, 1, 1, 0], &GradCheckConfig::default()).unwrap();
        assert!(report.passed, "{}: max rel error {:.3e}", v.name(), report.max_rel_error);
        assert!(report.max_rel_error < 1e-4);
    }
    assert!(start.elapsed().as_secs() < 60);
}

fn provenance() -> Provenance {
    Provenance {
        method: BgMethod::Moving { window: 60 },
        encoding: Encoding::SignedOffset128,
        warmup_frames: 60,
    }
}

/// Noise frames; leaks add a bright blob at a jittered position.
fn blob_frames(n: usize, seed: u64) -> (Vec<Frame>, Vec<u8>) {
    let mut rng = Rng::new(seed);
    let (w, h) = (32, 24);
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = (i % 2) as u8;
        let (bx, by) = (10.0 + 12.0 * rng.uniform(), 6.0 + 10.0 * rng.uniform());
        let px = (0..w * h)
            .map(|k| {
                let (x, yy) = ((k % w) as f64, (k / w) as f64);
                let blob = if y == 1 { 60.0 * (-((x - bx).powi(2) + (yy - by).powi(2)) / 8.0).exp() } else { 0.0 };
                (128.0 + 4.0 * rng.normal() + blob).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        frames.push(Frame::new(w, h, px, i as u32).unwrap());
        labels.push(y);
    }
    (frames, labels)
}

fn set<'a>(frames: &'a [Frame], labels: &[u8]) -> FrameSet<'a> {
    FrameSet {
        frames: frames.iter().collect(),
        labels: labels.to_vec(),
    }
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 16,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn training_learns_an_easy_task_and_is_deterministic() {
    let (tf, tl) = blob_frames(96, 1);
    let (vf, vl) = blob_frames(40, 2);
    let a = train(GasNetVariant::GasNet1, &set(&tf, &tl), &set(&vf, &vl), &quick_config(), &provenance()).unwrap();
    let b = train(GasNetVariant::GasNet1, &set(&tf, &tl), &set(&vf, &vl), &quick_config(), &provenance()).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.network.params(), b.network.params());
    assert!(a.val_accuracy >= 0.9, "val accuracy {}", a.val_accuracy);
    assert_eq!(a.curve[a.best_epoch - 1].val_acc, a.val_accuracy);
    let csv = a.curve_csv();
    assert_eq!(csv.lines().count(), a.curve.len() + 1);
}

#[test]
fn prediction_refuses_foreign_preprocessing() {
    let (tf, tl) = blob_frames(32, 1);
    let cfg = TrainConfig {
        epochs: 1,
        ..quick_config()
    };
    let m = train(GasNetVariant::GasNet1, &set(&tf, &tl), &set(&tf, &tl), &cfg, &provenance()).unwrap();
    let other = Provenance {
        method: BgMethod::Fixed,
        encoding: Encoding::SignedOffset128,
        warmup_frames: 0,
    };
    let refs: Vec<&Frame> = tf.iter().collect();
    assert!(m.predict(&refs, &other).is_err());
    assert!(m.predict(&refs, &provenance()).is_ok());
}

#[test]
fn labels_must_be_binary() {
    let (tf, mut tl) = blob_frames(8, 1);
    tl[0] = 3;
    assert!(train(GasNetVariant::GasNet1, &set(&tf, &tl), &set(&tf, &tl), &quick_config(), &provenance()).is_err());
}

#[test]
fn checkpoint_reload_reproduces_validation_accuracy() {
    let (tf, tl) = blob_frames(64, 5);
    let (vf, vl) = blob_frames(32, 6);
    let cfg = TrainConfig {
        epochs: 3,
        ..quick_config()
    };
    let m = train(GasNetVariant::GasNet2, &set(&tf, &tl), &set(&vf, &vl), &cfg, &provenance()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    m.save(&path).unwrap();
    let back = TrainedModel::load(&path).unwrap();
    assert_eq!(back.variant, m.variant);
    assert_eq!(back.best_epoch, m.best_epoch);
    assert_eq!(back.curve, m.curve);
    let vs = set(&vf, &vl);
    assert_eq!(back.accuracy_on(&vs, &provenance()).unwrap(), m.val_accuracy);
    assert_eq!(back.predict(&vs.frames, &provenance()).unwrap(), m.predict(&vs.frames, &provenance()).unwrap());
}

#[test]
fn frames_map_to_centered_unit_range() {
    let f = Frame::new(2, 1, vec![0, 255], 0).unwrap();
    let t = frames_to_tensor(&[&f]).unwrap();
    assert_eq!(t.shape, vec![1, 1, 1, 2]);
    assert_eq!(t.data, vec![-1.0, 127.0 / 128.0]);
}
