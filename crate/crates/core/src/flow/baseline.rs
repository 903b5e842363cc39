//! Threshold classifier on flow magnitude: a pixel moves when its speed
//! exceeds the movement-magnitude threshold (MMT); a frame shows a leak when
//! more pixels move than the plume-area threshold (PAT).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::farneback::{FarnebackParams, FlowField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub mmt: f64,
    pub pat: f64,
}

pub fn moving_pixels(speeds: &[f32], mmt: f64) -> usize {
    speeds.iter().filter(|&&s| s as f64 > mmt).count()
}

/// Label and moving-pixel count of one flow field.
pub fn classify_frame(flow: &FlowField, thresholds: ThresholdPair) -> (u8, usize) {
    classify_speeds(&flow.speed(), thresholds)
}

pub fn classify_speeds(speeds: &[f32], thresholds: ThresholdPair) -> (u8, usize) {
    let count = moving_pixels(speeds, thresholds.mmt);
    ((count as f64 > thresholds.pat) as u8, count)
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 || hi <= lo {
        return vec![lo; n.min(1)];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Linear-interpolated quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

pub const GRID_SIZE: usize = 12;
const LOW_Q: f64 = 0.5;
const HIGH_Q: f64 = 0.999;
/// Floors keep the log spacing defined when the lower quantile is zero.
const MIN_MMT: f64 = 1e-3;
const MIN_PAT: f64 = 1.0;

/// Threshold grids spanning the training distributions: MMT over pixel
/// speeds, PAT over per-frame moving-pixel counts at the median MMT.
pub fn build_grids(train_speeds: &[Vec<f32>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if train_speeds.is_empty() {
        return Err(Error::Data("no training frames for the threshold grid".into()));
    }
    let mut all: Vec<f64> = train_speeds.iter().flatten().map(|&s| s as f64).collect();
    all.sort_by(f64::total_cmp);
    let lo = quantile(&all, LOW_Q).max(MIN_MMT);
    let hi = quantile(&all, HIGH_Q).max(lo * 1.01);
    let mmt_grid = log_space(lo, hi, GRID_SIZE);
    let mid = mmt_grid[GRID_SIZE / 2];
    let mut counts: Vec<f64> = train_speeds.iter().map(|s| moving_pixels(s, mid) as f64).collect();
    counts.sort_by(f64::total_cmp);
    let plo = quantile(&counts, LOW_Q).max(MIN_PAT);
    let phi = quantile(&counts, HIGH_Q).max(plo * 1.01);
    Ok((mmt_grid, log_space(plo, phi, GRID_SIZE)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub mmt: f64,
    pub pat: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub best: ThresholdPair,
    pub best_accuracy: f64,
    /// Every evaluated pair, MMT-major in grid order.
    pub table: Vec<GridCell>,
}

impl GridSearch {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mmt,pat,val_accuracy\n");
        for c in &self.table {
            s.push_str(&format!("{:.6},{:.3},{:.6}\n", c.mmt, c.pat, c.val_accuracy));
        }
        s
    }
}

/// Exhaustive search; the first maximum in ascending (MMT, PAT) order wins.
pub fn grid_search(val_speeds: &[Vec<f32>], val_labels: &[u8], mmt_grid: &[f64], pat_grid: &[f64]) -> Result<GridSearch> {
    if val_speeds.is_empty() || val_speeds.len() != val_labels.len() {
        return Err(Error::Data("validation set is empty or mislabeled".into()));
    }
    if mmt_grid.is_empty() || pat_grid.is_empty() {
        return Err(Error::InvalidArgument("threshold grids must be non-empty".into()));
    }
    let mut mmts = mmt_grid.to_vec();
    mmts.sort_by(f64::total_cmp);
    let mut pats = pat_grid.to_vec();
    pats.sort_by(f64::total_cmp);
    let n = val_labels.len() as f64;
    let mut table = Vec::with_capacity(mmts.len() * pats.len());
    let mut best: Option<(ThresholdPair, f64)> = None;
    for &mmt in &mmts {
        let counts: Vec<usize> = val_speeds.iter().map(|s| moving_pixels(s, mmt)).collect();
        for &pat in &pats {
            let ok = counts
                .iter()
                .zip(val_labels)
                .filter(|(&c, &y)| ((c as f64 > pat) as u8) == y)
                .count();
            let acc = ok as f64 / n;
            table.push(GridCell {
                mmt,
                pat,
                val_accuracy: acc,
            });
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((ThresholdPair { mmt, pat }, acc));
            }
        }
    }
    let (best, best_accuracy) = best.expect("non-empty grid");
    Ok(GridSearch {
        best,
        best_accuracy,
        table,
    })
}

/// A fitted baseline: chosen thresholds plus everything needed to rerun.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub flow: FarnebackParams,
    pub thresholds: ThresholdPair,
    pub val_accuracy: f64,
    pub mmt_grid: Vec<f64>,
    pub pat_grid: Vec<f64>,
}

/// Builds the grids from training flow speeds and picks the best pair on
/// the validation set.
pub fn fit_baseline(
    flow: FarnebackParams,
    train_speeds: &[Vec<f32>],
    val_speeds: &[Vec<f32>],
    val_labels: &[u8],
) -> Result<(BaselineModel, GridSearch)> {
    let (mmt_grid, pat_grid) = build_grids(train_speeds)?;
    let search = grid_search(val_speeds, val_labels, &mmt_grid, &pat_grid)?;
    Ok((
        BaselineModel {
            flow,
            thresholds: search.best,
            val_accuracy: search.best_accuracy,
            mmt_grid,
            pat_grid,
        },
        search,
    ))
}

impl BaselineModel {
    pub fn predict(&self, speeds: &[Vec<f32>]) -> Vec<u8> {
        speeds.iter().map(|s| classify_speeds(s, self.thresholds).0).collect()
    }
}
