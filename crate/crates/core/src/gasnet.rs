//! GasNet-1/2/3 and their training loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bg::Provenance;
use crate::error::{Error, Result};
use crate::gvid::Frame;
use crate::nn::checkpoint::{self, AdamScalars, CheckpointHeader};
use crate::nn::{AdamConfig, AdamState, FlushDenormals, LayerSpec, Mode, Network, Real, Tensor};
use crate::rng::{mix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GasNetVariant {
    GasNet1,
    GasNet2,
    GasNet3,
}

impl GasNetVariant {
    pub const ALL: [GasNetVariant; 3] = [GasNetVariant::GasNet1, GasNetVariant::GasNet2, GasNetVariant::GasNet3];

    pub fn name(self) -> &'static str {
        match self {
            GasNetVariant::GasNet1 => "gasnet1",
            GasNetVariant::GasNet2 => "gasnet2",
            GasNetVariant::GasNet3 => "gasnet3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant '{s}' (gasnet1|gasnet2|gasnet3)")))
    }

    /// Filter count of each Conv-Pool block.
    pub fn blocks(self) -> &'static [usize] {
        match self {
            GasNetVariant::GasNet1 => &[4],
            GasNetVariant::GasNet2 => &[4, 8],
            GasNetVariant::GasNet3 => &[4, 8, 16, 32],
        }
    }

    /// Hidden dense widths before the two-way output.
    pub fn hidden(self) -> &'static [usize] {
        match self {
            GasNetVariant::GasNet1 => &[32],
            GasNetVariant::GasNet2 | GasNetVariant::GasNet3 => &[2400, 32],
        }
    }

    pub fn layer_specs(self, dropout_rate: f64) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for &f in self.blocks() {
            specs.extend([
                LayerSpec::Conv2d { out_channels: f },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: dropout_rate },
                LayerSpec::Maxpool2x2,
                LayerSpec::batchnorm(),
            ]);
        }
        specs.push(LayerSpec::Flatten);
        for &h in self.hidden() {
            specs.extend([LayerSpec::Dense { out_features: h }, LayerSpec::Relu]);
        }
        specs.extend([LayerSpec::Dense { out_features: 2 }, LayerSpec::SoftmaxXent]);
        specs
    }
}

/// Builds a freshly initialized network for `height x width` single-channel
/// input. Odd map sizes are floored by pooling; a map that would shrink to
/// zero is an error.
pub fn build<T: Real>(variant: GasNetVariant, height: usize, width: usize, dropout_rate: f64, seed: u64) -> Result<Network<T>> {
    let blocks = variant.blocks().len() as u32;
    if height >> blocks == 0 || width >> blocks == 0 {
        return Err(Error::Shape(format!(
            "{} needs input of at least {side}x{side} pixels, got {height}x{width}",
            variant.name(),
            side = 1usize << blocks
        )));
    }
    Network::new(&[1, height, width], &variant.layer_specs(dropout_rate), seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Training frames used to re-estimate batch-norm statistics with
    /// dropout inactive after every epoch; 0 keeps the running averages.
    pub bn_calibration_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 30,
            dropout_rate: 0.5,
            seed: 0,
            patience: 10,
            bn_calibration_frames: 256,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch_size and epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument("lr must be positive and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Labeled frames borrowed from a corpus.
#[derive(Clone, Debug, Default)]
pub struct FrameSet<'a> {
    pub frames: Vec<&'a Frame>,
    pub labels: Vec<u8>,
}

impl<'a> FrameSet<'a> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, frame: &'a Frame, label: u8) {
        self.frames.push(frame);
        self.labels.push(label);
    }
}

/// Maps 8-bit frames to `[N, 1, H, W]` with 128 at zero and unit range
/// roughly `[-1, 1]`.
pub fn frames_to_tensor(frames: &[&Frame]) -> Result<Tensor<f32>> {
    let first = frames.first().ok_or_else(|| Error::Data("no frames".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        if f.height != h || f.width != w {
            return Err(Error::Shape("frames of mixed dimensions in one batch".into()));
        }
        data.extend(f.pixels.iter().map(|&p| (p as f32 - 128.0) / 128.0));
    }
    Tensor::new(vec![frames.len(), 1, h, w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the train-mode predictions made while fitting.
    pub train_acc: f64,
    pub val_acc: f64,
    /// Mean validation cross-entropy, the tie-breaker between epochs of
    /// equal validation accuracy.
    pub val_loss: f64,
}

/// Training curve as CSV (`epoch,train_loss,train_acc,val_acc,val_loss`).
pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,val_acc,val_loss\n");
    for r in curve {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.train_loss, r.train_acc, r.val_acc, r.val_loss
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub variant: GasNetVariant,
    pub network: Network<f32>,
    pub provenance: Provenance,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub curve: Vec<EpochRecord>,
    pub adam_steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: u8,
    pub scores: [f64; 2],
}

const EVAL_CHUNK: usize = 64;

fn eval_network(net: &Network<f32>, frames: &[&Frame]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(EVAL_CHUNK) {
        let x = frames_to_tensor(chunk)?;
        for s in net.predict_proba(&x)? {
            out.push(Prediction {
                label: (s[1] > s[0]) as u8,
                scores: s,
            });
        }
    }
    Ok(out)
}

fn mean_xent(preds: &[Prediction], labels: &[u8]) -> f64 {
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p.scores[y as usize].max(1e-300).ln())
        .sum();
    total / labels.len().max(1) as f64
}

fn accuracy(preds: &[Prediction], labels: &[u8]) -> f64 {
    let ok = preds.iter().zip(labels).filter(|(p, &y)| p.label == y).count();
    ok as f64 / labels.len().max(1) as f64
}

/// Fits `variant` with Adam on `train`, scoring `val` after every epoch,
/// and returns the parameters of the best validation epoch (lowest
/// validation loss among equally accurate epochs). Stops early after
/// `patience` epochs without improvement.
pub fn train(
    variant: GasNetVariant,
    train: &FrameSet,
    val: &FrameSet,
    config: &TrainConfig,
    provenance: &Provenance,
) -> Result<TrainedModel> {
    config.validate()?;
    let _ftz = FlushDenormals::new();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    if train.labels.iter().chain(&val.labels).any(|&y| y > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let (h, w) = (train.frames[0].height, train.frames[0].width);
    let mut net = build::<f32>(variant, h, w, config.dropout_rate, mix(config.seed ^ 0x6a5))?;
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::for_params(adam_cfg, &net.params());
    let mut grads = net.zero_grads();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut dropout_rng = Rng::derive(config.seed, 0xd0);
    let mut curve = Vec::new();
    struct Best {
        acc: f64,
        loss: f64,
        epoch: usize,
        net: Network<f32>,
    }
    let mut best: Option<Best> = None;
    for epoch in 1..=config.epochs {
        Rng::derive(config.seed, 0x5_0000 + epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let frames: Vec<&Frame> = batch.iter().map(|&i| train.frames[i]).collect();
            let labels: Vec<u8> = batch.iter().map(|&i| train.labels[i]).collect();
            let x = frames_to_tensor(&frames)?;
            let (loss, trace) = net.loss_and_grad_into(&x, &labels, Mode::Train, &mut dropout_rng, &mut grads)?;
            loss_sum += loss * batch.len() as f64;
            correct += trace
                .logits
                .data
                .chunks(2)
                .zip(&labels)
                .filter(|(l, &y)| ((l[1] > l[0]) as u8) == y)
                .count();
            net.commit_batch_stats(&trace);
            adam.step(net.params_mut(), &grads);
        }
        if config.bn_calibration_frames > 0 {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            Rng::derive(config.seed, 0xca1).shuffle(&mut idx);
            idx.truncate(config.bn_calibration_frames);
            idx.sort_unstable();
            let frames: Vec<&Frame> = idx.iter().map(|&i| train.frames[i]).collect();
            net.recalibrate_batchnorm(&frames_to_tensor(&frames)?)?;
        }
        let preds = eval_network(&net, &val.frames)?;
        let val_acc = accuracy(&preds, &val.labels);
        let val_loss = mean_xent(&preds, &val.labels);
        curve.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            val_loss,
        });
        let improved = best
            .as_ref()
            .is_none_or(|b| val_acc > b.acc || (val_acc == b.acc && val_loss < b.loss));
        if improved {
            best = Some(Best {
                acc: val_acc,
                loss: val_loss,
                epoch,
                net: net.clone(),
            });
        } else if epoch - best.as_ref().unwrap().epoch >= config.patience {
            break;
        }
    }
    let Best {
        acc: val_accuracy,
        epoch: best_epoch,
        net: network,
        ..
    } = best.expect("at least one epoch");
    Ok(TrainedModel {
        variant,
        network,
        provenance: provenance.clone(),
        config: config.clone(),
        best_epoch,
        val_accuracy,
        curve,
        adam_steps: adam.t,
    })
}

impl TrainedModel {
    /// Labels and softmax scores for frames preprocessed as `provenance`.
    pub fn predict(&self, frames: &[&Frame], provenance: &Provenance) -> Result<Vec<Prediction>> {
        if *provenance != self.provenance {
            return Err(Error::Data(format!(
                "provenance mismatch: model trained on '{}' residuals, frames are '{}'",
                self.provenance.method.name(),
                provenance.method.name()
            )));
        }
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        eval_network(&self.network, frames)
    }

    pub fn accuracy_on(&self, set: &FrameSet, provenance: &Provenance) -> Result<f64> {
        Ok(accuracy(&self.predict(&set.frames, provenance)?, &set.labels))
    }

    pub fn curve_csv(&self) -> String {
        curve_csv(&self.curve)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            architecture: self.variant.name().into(),
            input_shape: vec![],
            layers: vec![],
            tensors: vec![],
            provenance: serde_json::to_value(&self.provenance)?,
            rng_seed: self.config.seed,
            adam: AdamScalars {
                config: AdamConfig {
                    lr: self.config.lr,
                    ..AdamConfig::default()
                },
                t: self.adam_steps,
            },
            extra: serde_json::json!({
                "train_config": self.config,
                "best_epoch": self.best_epoch,
                "val_accuracy": self.val_accuracy,
                "curve": self.curve,
            }),
        };
        checkpoint::save(path, &self.network, &header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, network) = checkpoint::load(path)?;
        let field = |k: &str| {
            h.extra
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks '{k}'")))
        };
        Ok(Self {
            variant: GasNetVariant::parse(&h.architecture)?,
            network,
            provenance: serde_json::from_value(h.provenance.clone())
                .map_err(|_| Error::Format("checkpoint without preprocessing provenance".into()))?,
            config: serde_json::from_value(field("train_config")?)?,
            best_epoch: serde_json::from_value(field("best_epoch")?)?,
            val_accuracy: serde_json::from_value(field("val_accuracy")?)?,
            curve: serde_json::from_value(field("curve")?)?,
            adam_steps: h.adam.t,
        })
    }
}
