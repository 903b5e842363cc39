use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::task::BinaryTask;

pub const FOLDS: usize = 10;

/// Binary confusion counts with label 1 (leak) as the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tp: usize,
}

impl ConfusionMatrix {
    pub fn from_predictions(predicted: &[u8], truth: &[u8]) -> Self {
        let mut m = Self::default();
        for (&p, &y) in predicted.iter().zip(truth) {
            match (y, p) {
                (0, 0) => m.tn += 1,
                (0, _) => m.fp += 1,
                (_, 0) => m.fn_ += 1,
                _ => m.tp += 1,
            }
        }
        m
    }

    pub fn total(&self) -> usize {
        self.tn + self.fn_ + self.fp + self.tp
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    pub fn add(&mut self, other: &Self) {
        self.tn += other.tn;
        self.fn_ += other.fn_;
        self.fp += other.fp;
        self.tp += other.tp;
    }
}

/// Random partition of `0..n` into `k` folds whose sizes differ by at
/// most one.
pub fn random_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(Error::Data(format!("cannot split {n} test frames into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::derive(seed, 0xf01d).shuffle(&mut idx);
    let mut folds = vec![Vec::new(); k];
    for (i, j) in idx.into_iter().enumerate() {
        folds[i % k].push(j);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: BinaryTask,
    pub task_id: String,
    /// `gasnet2`, `baseline`, ...
    pub detector: String,
    pub bg_method: String,
    /// Pooled accuracy over the whole test set (equal to `confusion.accuracy()`).
    pub accuracy_mean: f64,
    /// Population standard deviation of the fold accuracies.
    pub accuracy_std: f64,
    pub fold_accuracies: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub val_accuracy: f64,
    pub sizes: SetSizes,
    pub seed: u64,
    /// Detector config, preprocessing and training summary.
    pub provenance: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SetSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Scores `predicted` against `truth`, overall and on `FOLDS` seeded random folds.
pub fn score(predicted: &[u8], truth: &[u8], seed: u64) -> Result<(ConfusionMatrix, Vec<f64>)> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    let confusion = ConfusionMatrix::from_predictions(predicted, truth);
    let folds = random_folds(truth.len(), FOLDS, seed)?;
    let accs = folds
        .iter()
        .map(|f| {
            let p: Vec<u8> = f.iter().map(|&i| predicted[i]).collect();
            let y: Vec<u8> = f.iter().map(|&i| truth[i]).collect();
            ConfusionMatrix::from_predictions(&p, &y).accuracy()
        })
        .collect();
    Ok((confusion, accs))
}
