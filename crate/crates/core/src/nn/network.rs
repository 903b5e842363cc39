use crate::error::{Error, Result};
use crate::rng::Rng;

use super::layers::{backward_layer, forward_layer, output_shape, Layer, LayerCache, LayerSpec, Mode};
use super::{Real, Tensor};

/// A sequential layer stack with a softmax cross-entropy head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub input_shape: Vec<usize>,
    pub specs: Vec<LayerSpec>,
    pub layers: Vec<Layer<T>>,
    /// Per-sample input shape of every layer, plus the logit shape last.
    pub shapes: Vec<Vec<usize>>,
}

/// Forward-pass record needed for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub batch: usize,
    pub mode: Mode,
    pub caches: Vec<LayerCache<T>>,
    pub logits: Tensor<T>,
}

impl<T: Real> Trace<T> {
    /// Compact fingerprint of every piecewise-linear decision (ReLU gates and
    /// pool winners) taken during the pass.
    pub fn decision_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for cache in &self.caches {
            match cache {
                LayerCache::Relu { active } => active.iter().for_each(|&a| eat(a as u64)),
                LayerCache::Pool { argmax } => argmax.iter().for_each(|&a| eat(a as u64)),
                _ => {}
            }
        }
        h
    }
}

/// Gradients in the order of [`Network::params`].
pub type Gradients<T> = Vec<Vec<T>>;

/// Mean cross-entropy of softmax(logits) against `labels`, the probability
/// rows, and the gradient of the mean loss with respect to the logits.
pub fn softmax_xent<T: Real>(logits: &[T], labels: &[u8]) -> Result<(f64, Vec<T>, Vec<T>)> {
    let n = labels.len();
    if logits.len() != 2 * n {
        return Err(Error::Shape(format!(
            "{} logits for {n} labels; need two per sample",
            logits.len()
        )));
    }
    let mut probs = vec![T::ZERO; 2 * n];
    let mut dlogits = vec![T::ZERO; 2 * n];
    let mut loss = 0.0f64;
    let inv_n = T::from_f64(1.0 / n as f64);
    for (i, &y) in labels.iter().enumerate() {
        if y > 1 {
            return Err(Error::InvalidArgument(format!("label {y} outside {{0, 1}}")));
        }
        let (a, b) = (logits[2 * i], logits[2 * i + 1]);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let z = ea + eb;
        let p = [ea / z, eb / z];
        let lse = m + z.ln();
        loss += (lse - logits[2 * i + y as usize]).to_f64();
        for k in 0..2 {
            probs[2 * i + k] = p[k];
            let target = if k == y as usize { T::ONE } else { T::ZERO };
            dlogits[2 * i + k] = (p[k] - target) * inv_n;
        }
    }
    Ok((loss / n as f64, probs, dlogits))
}

impl<T: Real> Network<T> {
    /// Builds and initializes a network for per-sample `input_shape`
    /// (`[C, H, W]`). The final spec must be `SoftmaxXent`.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if specs.last() != Some(&LayerSpec::SoftmaxXent) {
            return Err(Error::Shape("network must end with a softmax_xent head".into()));
        }
        if specs[..specs.len() - 1].contains(&LayerSpec::SoftmaxXent) {
            return Err(Error::Shape("softmax_xent may only appear last".into()));
        }
        let mut rng = Rng::derive(seed, 0x1417);
        let mut shapes = vec![input_shape.to_vec()];
        let mut layers = Vec::new();
        for spec in specs {
            let cur = shapes.last().unwrap().clone();
            let next = output_shape(spec, &cur)?;
            if next.contains(&0) {
                return Err(Error::Shape(format!("{spec:?} collapses {cur:?} to {next:?}")));
            }
            if let Some(layer) = Layer::build(spec, &cur, &mut rng)? {
                layers.push(layer);
                shapes.push(next);
            }
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            specs: specs.to_vec(),
            layers,
            shapes,
        })
    }

    pub fn params(&self) -> Vec<&Vec<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// `layer{i}.{kind}.{weight|bias|gamma|beta}` for every parameter tensor.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let names: &[&str] = match l {
                Layer::BatchNorm(_) => &["gamma", "beta"],
                Layer::Conv2d(_) | Layer::Dense(_) => &["weight", "bias"],
                _ => &[],
            };
            for n in names {
                out.push(format!("layer{i}.{}.{n}", l.kind()));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            specs: self.specs.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            shapes: self.shapes.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        if x.shape.len() != self.input_shape.len() + 1 || x.shape[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match network input {:?}",
                x.shape, self.input_shape
            )));
        }
        if x.shape[0] == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(x.shape[0])
    }

    fn run(&self, x: &Tensor<T>, mode: Mode, rng: &mut Rng, keep: bool) -> Result<Trace<T>> {
        let n = self.check_input(x)?;
        let mut act = x.data.clone();
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for (i, layer) in self.layers.iter().enumerate() {
            let f = forward_layer(layer, act, n, &self.shapes[i], mode, keep, rng);
            act = f.output;
            if !act.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite activation after layer {i} ({})",
                    layer.kind()
                )));
            }
            if let Some(c) = f.cache {
                caches.push(c);
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shapes.last().unwrap());
        Ok(Trace {
            batch: n,
            mode,
            caches,
            logits: Tensor { shape, data: act },
        })
    }

    /// Logits for a batch. Eval mode ignores `rng`.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        Ok(self.run(x, mode, rng, false)?.logits)
    }

    /// Forward pass that records everything backpropagation needs. Batch
    /// normalization statistics are not folded into the running averages;
    /// see [`Network::commit_batch_stats`].
    pub fn forward_trace(&self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Trace<T>> {
        self.run(x, mode, rng, true)
    }

    /// Softmax probabilities in eval mode.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Vec<[f64; 2]>> {
        let logits = self.forward(x, Mode::Eval, &mut Rng::new(0))?;
        Ok(logits
            .data
            .chunks(2)
            .map(|r| {
                let (a, b) = (r[0].to_f64(), r[1].to_f64());
                let m = a.max(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                [ea / (ea + eb), eb / (ea + eb)]
            })
            .collect())
    }

    /// Gradients of the loss whose logit gradient is `dlogits`.
    pub fn backward(&self, trace: &Trace<T>, dlogits: Vec<T>) -> Result<Gradients<T>> {
        let mut grads = self.zero_grads();
        self.backward_into(trace, dlogits, &mut grads)?;
        Ok(grads)
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        self.params().iter().map(|p| vec![T::ZERO; p.len()]).collect()
    }

    /// As [`Network::backward`], overwriting a gradient buffer from
    /// [`Network::zero_grads`].
    pub fn backward_into(&self, trace: &Trace<T>, dlogits: Vec<T>, grads: &mut Gradients<T>) -> Result<()> {
        if grads.len() != self.params().len() {
            return Err(Error::Shape("gradient buffer does not match the network".into()));
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            offsets.push(k);
            k += l.params().len();
        }
        let first_with_params = self.layers.iter().position(|l| !l.params().is_empty()).unwrap_or(0);
        let mut dy = dlogits;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let np = layer.params().len();
            let g = &mut grads[offsets[i]..offsets[i] + np];
            let need_dx = i > first_with_params;
            match backward_layer(layer, &trace.caches[i], dy, trace.batch, &self.shapes[i], trace.mode, g, need_dx) {
                Some(d) => dy = d,
                None => break,
            }
        }
        for (g, name) in grads.iter().zip(self.param_names()) {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient in {name}")));
            }
        }
        Ok(())
    }

    /// Forward, loss and backward in one call. Returns the mean loss,
    /// gradients and the trace.
    pub fn loss_and_grad(
        &self,
        x: &Tensor<T>,
        labels: &[u8],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(f64, Gradients<T>, Trace<T>)> {
        let mut grads = self.zero_grads();
        let (loss, trace) = self.loss_and_grad_into(x, labels, mode, rng, &mut grads)?;
        Ok((loss, grads, trace))
    }

    /// As [`Network::loss_and_grad`] with a reusable gradient buffer.
    pub fn loss_and_grad_into(
        &self,
        x: &Tensor<T>,
        labels: &[u8],
        mode: Mode,
        rng: &mut Rng,
        grads: &mut Gradients<T>,
    ) -> Result<(f64, Trace<T>)> {
        let trace = self.forward_trace(x, mode, rng)?;
        let (loss, _, dlogits) = softmax_xent(&trace.logits.data, labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss is {loss}")));
        }
        self.backward_into(&trace, dlogits, grads)?;
        Ok((loss, trace))
    }

    /// Folds the batch statistics of a train-mode trace into the running
    /// averages: `running = momentum * running + (1 - momentum) * batch`.
    pub fn commit_batch_stats(&mut self, trace: &Trace<T>) {
        for (layer, cache) in self.layers.iter_mut().zip(&trace.caches) {
            if let (Layer::BatchNorm(bn), LayerCache::BatchNorm { batch_stats: Some((mean, var)), .. }) =
                (layer, cache)
            {
                let m = T::from_f64(bn.momentum);
                let one_m = T::from_f64(1.0 - bn.momentum);
                for c in 0..bn.channels {
                    bn.running_mean[c] = m * bn.running_mean[c] + one_m * mean[c];
                    bn.running_var[c] = m * bn.running_var[c] + one_m * var[c];
                }
            }
        }
    }

    /// Replaces every batch-norm running average with the exact statistics
    /// of `x` as seen with dropout inactive, i.e. under eval-mode inputs.
    pub fn recalibrate_batchnorm(&mut self, x: &Tensor<T>) -> Result<()> {
        let n = self.check_input(x)?;
        let mut act = x.data.clone();
        let mut rng = Rng::new(0);
        for i in 0..self.layers.len() {
            let mode = match self.layers[i] {
                Layer::BatchNorm(_) => Mode::Train,
                _ => Mode::Eval,
            };
            let f = forward_layer(&self.layers[i], act, n, &self.shapes[i], mode, mode == Mode::Train, &mut rng);
            act = f.output;
            if let (Layer::BatchNorm(bn), Some(LayerCache::BatchNorm { batch_stats: Some((mean, var)), .. })) =
                (&mut self.layers[i], f.cache)
            {
                bn.running_mean = mean;
                bn.running_var = var;
            }
            if matches!(self.layers[i], Layer::Flatten) {
                break;
            }
        }
        Ok(())
    }

    /// Batch-norm running statistics in layer order (mean then variance).
    pub fn buffers(&self) -> Vec<&Vec<T>> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::BatchNorm(b) => vec![&b.running_mean, &b.running_var],
                _ => vec![],
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::BatchNorm(b) => vec![&mut b.running_mean, &mut b.running_var],
                _ => vec![],
            })
            .collect()
    }
}
