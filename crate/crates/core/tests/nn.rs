use ogi_core::nn::checkpoint::{self, AdamScalars, CheckpointHeader};
use ogi_core::nn::gradcheck::{grad_check, grad_check_with, GradCheckConfig};
use ogi_core::nn::layers::{backward_layer, col2im, forward_layer, im2col, Layer};
use ogi_core::nn::{softmax_xent, AdamConfig, LayerSpec, Mode, Network, Tensor};
use ogi_core::rng::Rng;
use proptest::prelude::*;

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

fn tiny_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { out_channels: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: 2 },
        LayerSpec::SoftmaxXent,
    ]
}

fn conv_net(h: usize, w: usize, seed: u64) -> Network<f64> {
    Network::new(
        &[1, h, w],
        &[LayerSpec::Conv2d { out_channels: 1 }, LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }, LayerSpec::SoftmaxXent],
        seed,
    )
    .unwrap()
}

fn conv_only(net: &Network<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let f = forward_layer(&net.layers[0], x.data.clone(), x.shape[0], &x.shape[1..], Mode::Eval, false, &mut Rng::new(0));
    f.output
}

#[test]
fn conv_of_constant_image_is_constant_inside() {
    let mut net = conv_net(6, 7, 1);
    let s: f64 = match &net.layers[0] {
        Layer::Conv2d(c) => c.weight.iter().sum(),
        _ => unreachable!(),
    };
    if let Layer::Conv2d(c) = &mut net.layers[0] {
        c.bias[0] = 0.0;
    }
    let x = Tensor::new(vec![1, 1, 6, 7], vec![2.5; 42]).unwrap();
    let y = conv_only(&net, &x);
    for yy in 1..5 {
        for xx in 1..6 {
            assert!((y[yy * 7 + xx] - s * 2.5).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let net = conv_net(4, 4, 9);
    let x = random_tensor(vec![1, 1, 4, 4], 3);
    let y = conv_only(&net, &x);
    let Layer::Conv2d(c) = &net.layers[0] else { unreachable!() };
    for oy in 0..4i32 {
        for ox in 0..4i32 {
            let mut acc = c.bias[0];
            for ky in 0..3i32 {
                for kx in 0..3i32 {
                    let (sy, sx) = (oy + ky - 1, ox + kx - 1);
                    if (0..4).contains(&sy) && (0..4).contains(&sx) {
                        acc += c.weight[(ky * 3 + kx) as usize] * x.data[(sy * 4 + sx) as usize];
                    }
                }
            }
            assert!((y[(oy * 4 + ox) as usize] - acc).abs() < 1e-6);
        }
    }
}

#[test]
fn maxpool_picks_window_max_and_routes_gradient() {
    let x = vec![1.0f64, 2.0, 3.0, 4.0];
    let f = forward_layer::<f64>(&Layer::MaxPool2x2, x, 1, &[1, 2, 2], Mode::Train, true, &mut Rng::new(0));
    assert_eq!(f.output, vec![4.0]);
    let dx = backward_layer(&Layer::MaxPool2x2, &f.cache.unwrap(), vec![1.5], 1, &[1, 2, 2], Mode::Train, &mut [], true).unwrap();
    assert_eq!(dx, vec![0.0, 0.0, 0.0, 1.5]);
}

#[test]
fn maxpool_floors_odd_sizes() {
    let x: Vec<f64> = (0..15).map(|v| v as f64).collect();
    let f = forward_layer::<f64>(&Layer::MaxPool2x2, x, 1, &[1, 3, 5], Mode::Eval, false, &mut Rng::new(0));
    assert_eq!(f.output, vec![6.0, 8.0]);
}

#[test]
fn softmax_examples() {
    let (loss, p, _) = softmax_xent(&[0.0f64, 0.0], &[1]).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(p, vec![0.5, 0.5]);
    let (loss, _, _) = softmax_xent(&[20.0f64, -20.0], &[0]).unwrap();
    assert!(loss < 1e-15);
    assert!(softmax_xent(&[0.0f64, 0.0], &[2]).is_err());
    assert!(softmax_xent(&[0.0f64, 0.0, 1.0], &[0]).is_err());
}

#[test]
fn softmax_matches_f64_reference() {
    let mut rng = Rng::new(5);
    let n = 32;
    let logits: Vec<f32> = (0..2 * n).map(|_| rng.uniform_range(-8.0, 8.0) as f32).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
    let (loss, probs, _) = softmax_xent(&logits, &labels).unwrap();
    let mut want = 0.0;
    for i in 0..n {
        let (a, b) = (logits[2 * i] as f64, logits[2 * i + 1] as f64);
        let z = a.exp() + b.exp();
        let pt = [a.exp() / z, b.exp() / z][labels[i] as usize];
        want -= pt.ln();
        let s = probs[2 * i] + probs[2 * i + 1];
        assert!((s - 1.0).abs() < 1e-6);
    }
    want /= n as f64;
    assert!((loss - want).abs() < 1e-5, "{loss} vs {want}");
}

#[test]
fn zero_dense_net_has_zero_weight_gradient_on_symmetric_batch() {
    let mut net = Network::<f64>::new(&[3], &[LayerSpec::Dense { out_features: 2 }, LayerSpec::SoftmaxXent], 1).unwrap();
    for p in net.params_mut() {
        p.iter_mut().for_each(|v| *v = 0.0);
    }
    let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap();
    let (_, g, _) = net.loss_and_grad(&x, &[0, 1], Mode::Train, &mut Rng::new(0)).unwrap();
    assert!(g.iter().flatten().all(|v| v.abs() < 1e-15));
}

#[test]
fn tiny_net_gradients_match_finite_differences() {
    let net = Network::<f64>::new(&[1, 6, 6], &tiny_specs(), 11).unwrap();
    let x = random_tensor(vec![3, 1, 6, 6], 12);
    let cfg = GradCheckConfig::default();
    let r = grad_check(&net, &x, &[0, 1, 1], &cfg).unwrap();
    assert!(r.passed, "{r:?}");
    assert_eq!(r.probed, net.param_count());
}

#[test]
fn batchnorm_and_dropout_gradients_match_finite_differences() {
    let specs = vec![
        LayerSpec::Conv2d { out_channels: 3 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.3 },
        LayerSpec::Maxpool2x2,
        LayerSpec::batchnorm(),
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: 5 },
        LayerSpec::Relu,
        LayerSpec::Dense { out_features: 2 },
        LayerSpec::SoftmaxXent,
    ];
    let net = Network::<f64>::new(&[1, 6, 8], &specs, 4).unwrap();
    let x = random_tensor(vec![4, 1, 6, 8], 13);
    let r = grad_check(&net, &x, &[0, 1, 1, 0], &GradCheckConfig::default()).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn corrupted_conv_backward_fails_the_check() {
    let net = Network::<f64>::new(&[1, 6, 6], &tiny_specs(), 11).unwrap();
    let x = random_tensor(vec![3, 1, 6, 6], 12);
    let r = grad_check_with(&net, &x, &[0, 1, 1], &GradCheckConfig::default(), |n, x, y, seed| {
        let (_, mut g, _) = n.loss_and_grad(x, y, Mode::Train, &mut Rng::new(seed))?;
        // Drop the contribution of the last kernel tap.
        for o in 0..2 {
            g[0][o * 9 + 8] = 0.0;
        }
        Ok(g)
    })
    .unwrap();
    assert!(!r.passed);
    assert!(r.tensors[0].max_rel_error > 1e-2);
}

#[test]
fn gradcheck_is_deterministic_without_dropout() {
    let specs = vec![
        LayerSpec::Conv2d { out_channels: 2 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.0 },
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: 2 },
        LayerSpec::SoftmaxXent,
    ];
    let net = Network::<f64>::new(&[1, 6, 6], &specs, 2).unwrap();
    let x = random_tensor(vec![2, 1, 6, 6], 3);
    let cfg = GradCheckConfig::default();
    let a = grad_check(&net, &x, &[1, 0], &cfg).unwrap();
    let b = grad_check(&net, &x, &[1, 0], &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batchnorm_train_output_is_standardized() {
    let net = Network::<f64>::new(
        &[3, 5, 4],
        &[LayerSpec::batchnorm(), LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }, LayerSpec::SoftmaxXent],
        0,
    )
    .unwrap();
    let mut x = random_tensor(vec![6, 3, 5, 4], 8);
    x.data.iter_mut().enumerate().for_each(|(i, v)| *v = *v * 7.0 + (i % 3) as f64 * 40.0);
    let f = forward_layer(&net.layers[0], x.data.clone(), 6, &[3, 5, 4], Mode::Train, false, &mut Rng::new(0));
    for c in 0..3 {
        let vals: Vec<f64> = (0..6).flat_map(|s| f.output[(s * 3 + c) * 20..(s * 3 + c + 1) * 20].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn running_stats_follow_momentum() {
    let mut net = Network::<f64>::new(
        &[1, 2, 2],
        &[LayerSpec::batchnorm(), LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }, LayerSpec::SoftmaxXent],
        0,
    )
    .unwrap();
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
    let t = net.forward_trace(&x, Mode::Train, &mut Rng::new(0)).unwrap();
    assert_eq!(net.buffers()[0], &vec![0.0]);
    net.commit_batch_stats(&t);
    assert!((net.buffers()[0][0] - 0.4).abs() < 1e-12);
    assert!((net.buffers()[1][0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);
}

#[test]
fn dropout_drops_rate_fraction_and_preserves_mean() {
    let n = 100_000;
    let f = forward_layer::<f64>(&Layer::Dropout { rate: 0.5 }, vec![1.0; n], 1, &[n], Mode::Train, false, &mut Rng::new(3));
    let zeros = f.output.iter().filter(|&&v| v == 0.0).count() as f64;
    // Binomial sd is sqrt(n/4) ~ 158.
    assert!((zeros - n as f64 / 2.0).abs() < 5.0 * 158.0);
    assert!(f.output.iter().all(|&v| v == 0.0 || v == 2.0));
    let mean = f.output.iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.02);
    let e = forward_layer::<f64>(&Layer::Dropout { rate: 0.5 }, vec![1.0; 10], 1, &[10], Mode::Eval, false, &mut Rng::new(3));
    assert_eq!(e.output, vec![1.0; 10]);
}

#[test]
fn eval_forward_is_pure() {
    let specs = vec![
        LayerSpec::Conv2d { out_channels: 4 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::Maxpool2x2,
        LayerSpec::batchnorm(),
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: 2 },
        LayerSpec::SoftmaxXent,
    ];
    let net = Network::<f32>::new(&[1, 8, 8], &specs, 1).unwrap();
    let x = random_tensor(vec![5, 1, 8, 8], 2).cast::<f32>();
    let a = net.forward(&x, Mode::Eval, &mut Rng::new(1)).unwrap();
    let b = net.forward(&x, Mode::Eval, &mut Rng::new(99)).unwrap();
    assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn shape_mismatch_and_divergence_are_errors() {
    let net = Network::<f64>::new(&[1, 6, 6], &tiny_specs(), 1).unwrap();
    let bad = random_tensor(vec![2, 1, 6, 5], 1);
    assert!(matches!(net.forward(&bad, Mode::Eval, &mut Rng::new(0)), Err(ogi_core::Error::Shape(_))));
    let mut x = random_tensor(vec![1, 1, 6, 6], 1);
    x.data[3] = f64::NAN;
    assert!(matches!(net.forward(&x, Mode::Eval, &mut Rng::new(0)), Err(ogi_core::Error::Divergence(_))));
    assert!(Network::<f64>::new(&[1, 1, 1], &[LayerSpec::Maxpool2x2, LayerSpec::SoftmaxXent], 0).is_err());
    assert!(Network::<f64>::new(&[1, 4, 4], &[LayerSpec::Flatten], 0).is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let specs = vec![
        LayerSpec::Conv2d { out_channels: 2 },
        LayerSpec::Relu,
        LayerSpec::Maxpool2x2,
        LayerSpec::batchnorm(),
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: 2 },
        LayerSpec::SoftmaxXent,
    ];
    let mut net = Network::<f32>::new(&[1, 4, 6], &specs, 21).unwrap();
    let x = random_tensor(vec![3, 1, 4, 6], 2).cast::<f32>();
    let t = net.forward_trace(&x, Mode::Train, &mut Rng::new(0)).unwrap();
    net.commit_batch_stats(&t);
    let header = CheckpointHeader {
        architecture: "test".into(),
        input_shape: vec![],
        layers: vec![],
        tensors: vec![],
        provenance: serde_json::json!({"method": "fixed"}),
        rng_seed: 21,
        adam: AdamScalars { config: AdamConfig::default(), t: 17 },
        extra: serde_json::Value::Null,
    };
    let bytes = checkpoint::encode(&net, &header).unwrap();
    let (h, back) = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, net);
    assert_eq!(h.adam.t, 17);
    assert_eq!(h.provenance["method"], "fixed");
    assert_eq!(checkpoint::encode(&back, &h).unwrap(), bytes);
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::decode(&extra).is_err());
}

proptest! {
    #[test]
    fn col2im_is_adjoint_of_im2col(c in 1usize..3, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let y: Vec<f64> = (0..c * 9 * h * w).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut cols = vec![0.0; c * 9 * h * w];
        im2col(&x, c, h, w, &mut cols);
        let mut back = vec![0.0; c * h * w];
        col2im(&y, c, h, w, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(a in -50.0f64..50.0, b in -50.0f64..50.0, shift in -100.0f64..100.0) {
        let (_, p, _) = softmax_xent(&[a, b], &[0]).unwrap();
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        let (_, q, _) = softmax_xent(&[a + shift, b + shift], &[0]).unwrap();
        prop_assert!((p[0] - q[0]).abs() < 1e-9);
    }
}
