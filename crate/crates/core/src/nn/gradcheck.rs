//! Central finite-difference verification of the analytic gradients.
//!
//! The loss is evaluated in train mode with the dropout stream rewound to a
//! fixed seed for every evaluation, so each perturbed pass sees the same
//! masks and batch-norm uses batch statistics exactly as in training. A probe
//! whose perturbation flips a ReLU gate or a pool winner straddles a kink;
//! it is retried with a smaller step and skipped if the flip persists.

use serde::Serialize;

use crate::error::Result;
use crate::rng::{mix, Rng};

use super::layers::Mode;
use super::network::{softmax_xent, Network};
use super::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    /// Entries probed per parameter tensor; larger tensors are sampled.
    pub max_probes_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-7,
            max_probes_per_tensor: 400,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub size: usize,
    pub probed: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
    pub max_rel_error: f64,
    pub probed: usize,
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval_loss(net: &Network<f64>, x: &Tensor<f64>, labels: &[u8], seed: u64) -> Result<(f64, u64)> {
    let mut rng = Rng::new(seed);
    let trace = net.forward_trace(x, Mode::Train, &mut rng)?;
    let (loss, _, _) = softmax_xent(&trace.logits.data, labels)?;
    Ok((loss, trace.decision_signature()))
}

/// Compares analytic gradients of the mean cross-entropy of `net` on
/// `(x, labels)` against central differences.
pub fn grad_check(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[u8],
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    grad_check_with(net, x, labels, config, |net, x, labels, seed| {
        let mut rng = Rng::new(seed);
        let (_, grads, _) = net.loss_and_grad(x, labels, Mode::Train, &mut rng)?;
        Ok(grads)
    })
}

/// As [`grad_check`] with a caller-supplied analytic gradient.
pub fn grad_check_with<F>(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[u8],
    config: &GradCheckConfig,
    analytic: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Network<f64>, &Tensor<f64>, &[u8], u64) -> Result<Vec<Vec<f64>>>,
{
    let dropout_seed = mix(config.seed ^ 0xd20f);
    let grads = analytic(net, x, labels, dropout_seed)?;
    let (_, base_sig) = eval_loss(net, x, labels, dropout_seed)?;
    let names = net.param_names();
    let mut probe = net.clone();
    let mut pick = Rng::derive(config.seed, 0x9c);
    let mut tensors = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let size = grads[ti].len();
        let mut idx: Vec<usize> = (0..size).collect();
        if size > config.max_probes_per_tensor {
            pick.shuffle(&mut idx);
            idx.truncate(config.max_probes_per_tensor);
            idx.sort_unstable();
        }
        let mut worst = 0.0f64;
        let mut skipped = 0;
        for &i in &idx {
            let orig = probe.params()[ti][i];
            let mut numeric = None;
            let mut h = config.step;
            for _ in 0..3 {
                probe.params_mut()[ti][i] = orig + h;
                let (lp, sp) = eval_loss(&probe, x, labels, dropout_seed)?;
                probe.params_mut()[ti][i] = orig - h;
                let (lm, sm) = eval_loss(&probe, x, labels, dropout_seed)?;
                probe.params_mut()[ti][i] = orig;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((lp - lm) / (2.0 * h));
                    break;
                }
                h *= 0.1;
            }
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            let a = grads[ti][i];
            let denom = a.abs().max(numeric.abs()).max(config.floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        tensors.push(TensorReport {
            name: name.clone(),
            size,
            probed: idx.len(),
            skipped,
            max_rel_error: worst,
        });
    }
    let probed: usize = tensors.iter().map(|t| t.probed).sum();
    let skipped: usize = tensors.iter().map(|t| t.skipped).sum();
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    // Kink skips are tolerated only while they stay rare.
    let passed = max_rel_error < config.tolerance && (skipped as f64) <= 0.01 * probed as f64;
    Ok(GradCheckReport {
        tensors,
        max_rel_error,
        probed,
        skipped,
        tolerance: config.tolerance,
        passed,
    })
}
