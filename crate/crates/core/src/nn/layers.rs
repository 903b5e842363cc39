//! Layer kernels. Activations are `[N, C, H, W]` (or `[N, F]` after
//! flatten), row-major. Convolutions are 3x3, stride 1, zero "same" padding;
//! pooling is 2x2 stride 2 and floors odd sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::real::gemm;
use super::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { out_channels: usize },
    Relu,
    Dropout { rate: f64 },
    Maxpool2x2,
    Batchnorm { momentum: f64, epsilon: f64 },
    Flatten,
    Dense { out_features: usize },
    SoftmaxXent,
}

impl LayerSpec {
    pub fn batchnorm() -> Self {
        LayerSpec::Batchnorm {
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in, 3, 3]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    Relu,
    Dropout { rate: f64 },
    MaxPool2x2,
    BatchNorm(BatchNorm<T>),
    Flatten,
    Dense(Dense<T>),
}

/// What a layer remembers from its forward pass for the backward pass.
#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Conv { input: Vec<T> },
    Relu { active: Vec<bool> },
    Dropout { scale: Vec<T> },
    Pool { argmax: Vec<u32> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, batch_stats: Option<(Vec<T>, Vec<T>)> },
    Flatten,
    Dense { input: Vec<T> },
}

/// Per-sample output shape of `spec` given per-sample input shape.
pub fn output_shape(spec: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    let need3 = |what: &str| -> Result<(usize, usize, usize)> {
        match input {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(Error::Shape(format!("{what} needs a [C, H, W] input, got {input:?}"))),
        }
    };
    Ok(match spec {
        LayerSpec::Conv2d { out_channels } => {
            let (_, h, w) = need3("conv2d")?;
            vec![*out_channels, h, w]
        }
        LayerSpec::Relu | LayerSpec::Dropout { .. } => input.to_vec(),
        LayerSpec::Batchnorm { .. } => {
            need3("batchnorm")?;
            input.to_vec()
        }
        LayerSpec::Maxpool2x2 => {
            let (c, h, w) = need3("maxpool2x2")?;
            if h < 2 || w < 2 {
                return Err(Error::Shape(format!("maxpool2x2 on {h}x{w} map")));
            }
            vec![c, h / 2, w / 2]
        }
        LayerSpec::Flatten => vec![input.iter().product()],
        LayerSpec::Dense { out_features } => match input {
            [_] => vec![*out_features],
            _ => return Err(Error::Shape(format!("dense needs a flat input, got {input:?}"))),
        },
        LayerSpec::SoftmaxXent => match input {
            [2] => vec![2],
            _ => return Err(Error::Shape(format!("softmax head needs 2 logits, got {input:?}"))),
        },
    })
}

fn he_uniform<T: Real>(n: usize, fan_in: usize, rng: &mut Rng) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::from_f64(rng.uniform_range(-limit, limit))).collect()
}

impl<T: Real> Layer<T> {
    /// Instantiates `spec` for the given per-sample input shape.
    pub fn build(spec: &LayerSpec, input: &[usize], rng: &mut Rng) -> Result<Option<Self>> {
        output_shape(spec, input)?;
        Ok(Some(match spec {
            LayerSpec::Conv2d { out_channels } => {
                let cin = input[0];
                Layer::Conv2d(Conv2d {
                    in_channels: cin,
                    out_channels: *out_channels,
                    weight: he_uniform(out_channels * cin * 9, cin * 9, rng),
                    bias: vec![T::ZERO; *out_channels],
                })
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
                }
                Layer::Dropout { rate: *rate }
            }
            LayerSpec::Maxpool2x2 => Layer::MaxPool2x2,
            LayerSpec::Batchnorm { momentum, epsilon } => {
                let c = input[0];
                Layer::BatchNorm(BatchNorm {
                    channels: c,
                    gamma: vec![T::ONE; c],
                    beta: vec![T::ZERO; c],
                    running_mean: vec![T::ZERO; c],
                    running_var: vec![T::ONE; c],
                    momentum: *momentum,
                    epsilon: *epsilon,
                })
            }
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Dense { out_features } => {
                let fin = input[0];
                Layer::Dense(Dense {
                    in_features: fin,
                    out_features: *out_features,
                    weight: he_uniform(out_features * fin, fin, rng),
                    bias: vec![T::ZERO; *out_features],
                })
            }
            LayerSpec::SoftmaxXent => return Ok(None),
        }))
    }

    pub fn params(&self) -> Vec<&Vec<T>> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => vec![],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::Dropout { .. } => "dropout",
            Layer::MaxPool2x2 => "maxpool2x2",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64())).collect::<Vec<U>>();
        match self {
            Layer::Conv2d(l) => Layer::Conv2d(Conv2d {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                weight: c(&l.weight),
                bias: c(&l.bias),
            }),
            Layer::Relu => Layer::Relu,
            Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
            Layer::MaxPool2x2 => Layer::MaxPool2x2,
            Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
                channels: b.channels,
                gamma: c(&b.gamma),
                beta: c(&b.beta),
                running_mean: c(&b.running_mean),
                running_var: c(&b.running_var),
                momentum: b.momentum,
                epsilon: b.epsilon,
            }),
            Layer::Flatten => Layer::Flatten,
            Layer::Dense(d) => Layer::Dense(Dense {
                in_features: d.in_features,
                out_features: d.out_features,
                weight: c(&d.weight),
                bias: c(&d.bias),
            }),
        }
    }
}

/// Unfolds one `[C, H, W]` sample into `[C*9, H*W]` patch columns.
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..((ch * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::ZERO;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::ZERO;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..((ch * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                dst[x - 1] += src[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] += src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] += src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

const DROPOUT_CHUNK: usize = 4096;

pub struct Forwarded<T> {
    pub output: Vec<T>,
    pub cache: Option<LayerCache<T>>,
}

/// Runs one layer over a batch of `n` samples with per-sample input shape
/// `shape`.
pub fn forward_layer<T: Real>(
    layer: &Layer<T>,
    x: Vec<T>,
    n: usize,
    shape: &[usize],
    mode: Mode,
    keep_cache: bool,
    rng: &mut Rng,
) -> Forwarded<T> {
    match layer {
        Layer::Conv2d(conv) => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let hw = h * w;
            let o = conv.out_channels;
            let mut out = vec![T::ZERO; n * o * hw];
            let mut cols = vec![T::ZERO; c * 9 * hw];
            for s in 0..n {
                im2col(&x[s * c * hw..(s + 1) * c * hw], c, h, w, &mut cols);
                let y = &mut out[s * o * hw..(s + 1) * o * hw];
                for (oc, plane) in y.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v = conv.bias[oc]);
                }
                gemm(o, c * 9, hw, &conv.weight, false, &cols, false, T::ONE, y);
            }
            Forwarded {
                output: out,
                cache: keep_cache.then_some(LayerCache::Conv { input: x }),
            }
        }
        Layer::Relu => {
            let mut x = x;
            let active = if keep_cache {
                x.iter().map(|&v| v > T::ZERO).collect()
            } else {
                Vec::new()
            };
            x.iter_mut().for_each(|v| *v = v.max(T::ZERO));
            Forwarded {
                output: x,
                cache: keep_cache.then_some(LayerCache::Relu { active }),
            }
        }
        Layer::Dropout { rate } => {
            if mode == Mode::Eval || *rate == 0.0 {
                let scale = if keep_cache { vec![T::ONE; x.len()] } else { Vec::new() };
                return Forwarded {
                    output: x,
                    cache: keep_cache.then_some(LayerCache::Dropout { scale }),
                };
            }
            // One 16-bit uniform per activation.
            let threshold = (*rate * 65536.0).round() as u64;
            let keep_scale = T::from_f64(1.0 / (1.0 - rate));
            let mut x = x;
            let mut scale = vec![T::ZERO; x.len()];
            let mut bytes = [0u8; 2 * DROPOUT_CHUNK];
            let choice = [T::ZERO, keep_scale];
            for (xs, ss) in x.chunks_mut(DROPOUT_CHUNK).zip(scale.chunks_mut(DROPOUT_CHUNK)) {
                let buf = &mut bytes[..2 * xs.len()];
                rng.fill_bytes(buf);
                for ((v, s), b) in xs.iter_mut().zip(ss.iter_mut()).zip(buf.chunks_exact(2)) {
                    *s = choice[(u16::from_le_bytes([b[0], b[1]]) as u64 >= threshold) as usize];
                    *v *= *s;
                }
            }
            Forwarded {
                output: x,
                cache: keep_cache.then_some(LayerCache::Dropout { scale }),
            }
        }
        Layer::MaxPool2x2 => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(n * c * oh * ow);
            let mut argmax = if keep_cache { Vec::with_capacity(n * c * oh * ow) } else { Vec::new() };
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i0 = base + 2 * oy * w + 2 * ox;
                        let (mut best, mut v) = (i0, x[i0]);
                        for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                            let c = x[cand];
                            let take = c > v;
                            best = if take { cand } else { best };
                            v = if take { c } else { v };
                        }
                        out.push(v);
                        if keep_cache {
                            argmax.push(best as u32);
                        }
                    }
                }
            }
            Forwarded {
                output: out,
                cache: keep_cache.then_some(LayerCache::Pool { argmax }),
            }
        }
        Layer::BatchNorm(bn) => {
            let c = shape[0];
            let hw: usize = shape[1..].iter().product();
            let m = (n * hw) as f64;
            let eps = bn.epsilon;
            let (mean, var) = if mode == Mode::Train {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let p = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                        mean[ch] += p.iter().map(|v| v.to_f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for s in 0..n {
                    for ch in 0..c {
                        let p = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                        var[ch] += p.iter().map(|v| (v.to_f64() - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var)
            } else {
                (
                    bn.running_mean.iter().map(|v| v.to_f64()).collect(),
                    bn.running_var.iter().map(|v| v.to_f64()).collect(),
                )
            };
            let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
            let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
            let mut x = x;
            let mut xhat = if keep_cache { Vec::with_capacity(x.len()) } else { Vec::new() };
            for s in 0..n {
                for ch in 0..c {
                    let p = &mut x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    for v in p.iter_mut() {
                        let xh = (*v - mean_t[ch]) * inv_std[ch];
                        if keep_cache {
                            xhat.push(xh);
                        }
                        *v = bn.gamma[ch] * xh + bn.beta[ch];
                    }
                }
            }
            let batch_stats = (mode == Mode::Train).then(|| {
                (
                    mean.iter().map(|&v| T::from_f64(v)).collect(),
                    var.iter().map(|&v| T::from_f64(v)).collect(),
                )
            });
            Forwarded {
                output: x,
                cache: keep_cache.then_some(LayerCache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                }),
            }
        }
        Layer::Flatten => Forwarded {
            output: x,
            cache: keep_cache.then_some(LayerCache::Flatten),
        },
        Layer::Dense(d) => {
            let mut out = vec![T::ZERO; n * d.out_features];
            for row in out.chunks_mut(d.out_features) {
                row.copy_from_slice(&d.bias);
            }
            gemm(n, d.in_features, d.out_features, &x, false, &d.weight, true, T::ONE, &mut out);
            Forwarded {
                output: out,
                cache: keep_cache.then_some(LayerCache::Dense { input: x }),
            }
        }
    }
}

/// Backpropagates `dy` through one layer. Parameter gradients are written
/// (not accumulated) into `grads`. Returns the input gradient unless
/// `need_dx` is false.
#[allow(clippy::too_many_arguments)]
pub fn backward_layer<T: Real>(
    layer: &Layer<T>,
    cache: &LayerCache<T>,
    dy: Vec<T>,
    n: usize,
    in_shape: &[usize],
    mode: Mode,
    grads: &mut [Vec<T>],
    need_dx: bool,
) -> Option<Vec<T>> {
    match (layer, cache) {
        (Layer::Conv2d(conv), LayerCache::Conv { input }) => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let hw = h * w;
            let o = conv.out_channels;
            let (gw, gb) = grads.split_at_mut(1);
            let gw = &mut gw[0];
            let gb = &mut gb[0];
            gw.iter_mut().for_each(|v| *v = T::ZERO);
            gb.iter_mut().for_each(|v| *v = T::ZERO);
            let mut cols = vec![T::ZERO; c * 9 * hw];
            let mut dcols = if need_dx { vec![T::ZERO; c * 9 * hw] } else { Vec::new() };
            let mut dx = if need_dx { vec![T::ZERO; n * c * hw] } else { Vec::new() };
            for s in 0..n {
                let dys = &dy[s * o * hw..(s + 1) * o * hw];
                for (oc, plane) in dys.chunks(hw).enumerate() {
                    let mut acc = T::ZERO;
                    for &v in plane {
                        acc += v;
                    }
                    gb[oc] += acc;
                }
                im2col(&input[s * c * hw..(s + 1) * c * hw], c, h, w, &mut cols);
                gemm(o, hw, c * 9, dys, false, &cols, true, T::ONE, gw);
                if need_dx {
                    gemm(c * 9, o, hw, &conv.weight, true, dys, false, T::ZERO, &mut dcols);
                    col2im(&dcols, c, h, w, &mut dx[s * c * hw..(s + 1) * c * hw]);
                }
            }
            need_dx.then_some(dx)
        }
        (Layer::Relu, LayerCache::Relu { active }) => {
            let mut dy = dy;
            let gate = [T::ZERO, T::ONE];
            for (g, &a) in dy.iter_mut().zip(active) {
                *g *= gate[a as usize];
            }
            Some(dy)
        }
        (Layer::Dropout { .. }, LayerCache::Dropout { scale }) => {
            let mut dy = dy;
            for (g, &s) in dy.iter_mut().zip(scale) {
                *g *= s;
            }
            Some(dy)
        }
        (Layer::MaxPool2x2, LayerCache::Pool { argmax }) => {
            let total: usize = n * in_shape.iter().product::<usize>();
            let mut dx = vec![T::ZERO; total];
            for (&i, &g) in argmax.iter().zip(&dy) {
                dx[i as usize] += g;
            }
            Some(dx)
        }
        (Layer::BatchNorm(bn), LayerCache::BatchNorm { xhat, inv_std, .. }) => {
            let c = in_shape[0];
            let hw: usize = in_shape[1..].iter().product();
            let m = T::from_f64((n * hw) as f64);
            let (gg, gbeta) = grads.split_at_mut(1);
            let gg = &mut gg[0];
            let gbeta = &mut gbeta[0];
            let mut sum_dy = vec![T::ZERO; c];
            let mut sum_dy_xhat = vec![T::ZERO; c];
            for s in 0..n {
                for ch in 0..c {
                    let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                    for (&g, &xh) in dy[r.clone()].iter().zip(&xhat[r]) {
                        sum_dy[ch] += g;
                        sum_dy_xhat[ch] += g * xh;
                    }
                }
            }
            gg.copy_from_slice(&sum_dy_xhat);
            gbeta.copy_from_slice(&sum_dy);
            let mut dx = dy;
            for s in 0..n {
                for ch in 0..c {
                    let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                    let k = bn.gamma[ch] * inv_std[ch];
                    if mode == Mode::Train {
                        let mean_dy = sum_dy[ch] / m;
                        let mean_dyx = sum_dy_xhat[ch] / m;
                        for (g, &xh) in dx[r.clone()].iter_mut().zip(&xhat[r]) {
                            *g = k * (*g - mean_dy - xh * mean_dyx);
                        }
                    } else {
                        for g in dx[r].iter_mut() {
                            *g *= k;
                        }
                    }
                }
            }
            Some(dx)
        }
        (Layer::Flatten, LayerCache::Flatten) => Some(dy),
        (Layer::Dense(d), LayerCache::Dense { input }) => {
            let (gw, gb) = grads.split_at_mut(1);
            let gw = &mut gw[0];
            let gb = &mut gb[0];
            // Packing dy^T first keeps the large product on the fast path.
            let mut dyt = vec![T::ZERO; dy.len()];
            for (s, row) in dy.chunks(d.out_features).enumerate() {
                for (o, &g) in row.iter().enumerate() {
                    dyt[o * n + s] = g;
                }
            }
            gemm(d.out_features, n, d.in_features, &dyt, false, input, false, T::ZERO, gw);
            gb.iter_mut().for_each(|v| *v = T::ZERO);
            for row in dy.chunks(d.out_features) {
                for (b, &g) in gb.iter_mut().zip(row) {
                    *b += g;
                }
            }
            if need_dx {
                let mut dx = vec![T::ZERO; n * d.in_features];
                gemm(n, d.out_features, d.in_features, &dy, false, &d.weight, false, T::ZERO, &mut dx);
                Some(dx)
            } else {
                None
            }
        }
        _ => panic!("layer/cache mismatch for {}", layer.kind()),
    }
}
