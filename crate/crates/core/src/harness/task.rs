use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gvid::{same_distance, DatasetManifest};
use crate::rng::{mix, Rng};

use super::split::{FrameRef, Splits};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregation {
    /// One model per (distance, leak class).
    #[serde(rename = "1")]
    Method1,
    /// One model per distance, leak classes pooled.
    #[serde(rename = "2")]
    Method2,
    /// One model for everything.
    #[serde(rename = "3")]
    Method3,
}

impl Aggregation {
    pub fn number(self) -> u8 {
        match self {
            Aggregation::Method1 => 1,
            Aggregation::Method2 => 2,
            Aggregation::Method3 => 3,
        }
    }

    pub fn parse(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Aggregation::Method1),
            2 => Ok(Aggregation::Method2),
            3 => Ok(Aggregation::Method3),
            _ => Err(Error::InvalidArgument(format!("method must be 1, 2 or 3, got {n}"))),
        }
    }
}

/// A class-0 versus leak binary problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryTask {
    pub method: Aggregation,
    /// `None` pools every distance.
    pub distance_m: Option<f64>,
    /// `None` pools classes 1-7.
    pub positive_class: Option<u8>,
}

impl BinaryTask {
    pub fn method1(distance_m: f64, class: u8) -> Self {
        Self {
            method: Aggregation::Method1,
            distance_m: Some(distance_m),
            positive_class: Some(class),
        }
    }

    pub fn method2(distance_m: f64) -> Self {
        Self {
            method: Aggregation::Method2,
            distance_m: Some(distance_m),
            positive_class: None,
        }
    }

    pub fn method3() -> Self {
        Self {
            method: Aggregation::Method3,
            distance_m: None,
            positive_class: None,
        }
    }

    /// Stable identifier, e.g. `m1_d4.6_c7`, `m2_d9.8`, `m3`.
    pub fn id(&self) -> String {
        let mut s = format!("m{}", self.method.number());
        if let Some(d) = self.distance_m {
            s.push_str(&format!("_d{d:.1}"));
        }
        if let Some(c) = self.positive_class {
            s.push_str(&format!("_c{c}"));
        }
        s
    }

    fn accepts_distance(&self, d: f64) -> bool {
        self.distance_m.is_none_or(|t| same_distance(t, d))
    }

    fn accepts_positive(&self, class: u8) -> bool {
        class != 0 && self.positive_class.is_none_or(|c| c == class)
    }
}

/// The 35 method-1 tasks, distance-major.
pub fn method1_tasks(manifest: &DatasetManifest) -> Vec<BinaryTask> {
    let mut classes: Vec<u8> = manifest.segments.iter().map(|s| s.label()).filter(|&c| c != 0).collect();
    classes.sort_unstable();
    classes.dedup();
    manifest
        .distances_m
        .iter()
        .flat_map(|&d| classes.iter().map(move |&c| BinaryTask::method1(d, c)))
        .collect()
}

pub fn method2_tasks(manifest: &DatasetManifest) -> Vec<BinaryTask> {
    manifest.distances_m.iter().map(|&d| BinaryTask::method2(d)).collect()
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledFrames {
    pub frames: Vec<FrameRef>,
    pub labels: Vec<u8>,
}

impl LabeledFrames {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskSet {
    pub train: LabeledFrames,
    pub val: LabeledFrames,
    pub test: LabeledFrames,
}

/// Splits `total` over cells with the given capacities as evenly as
/// possible: quotas differ by at most one except where a cell runs out.
pub fn water_fill(capacities: &[usize], total: usize) -> Vec<usize> {
    let mut quota = vec![0usize; capacities.len()];
    let mut left = total.min(capacities.iter().sum());
    while left > 0 {
        let open: Vec<usize> = (0..capacities.len()).filter(|&i| quota[i] < capacities[i]).collect();
        let share = left / open.len();
        if share == 0 {
            // Hand the remainder to the first cells with room.
            for &i in open.iter().take(left) {
                quota[i] += 1;
            }
            break;
        }
        for &i in &open {
            let add = share.min(capacities[i] - quota[i]);
            quota[i] += add;
            left -= add;
        }
    }
    quota
}

/// FNV-1a, for seeds derived from names.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Key of a sampling cell: (distance in mm, class).
type Cell = (i64, u8);

fn pick_balanced(
    cells: &BTreeMap<Cell, Vec<FrameRef>>,
    total: usize,
    rng: &mut Rng,
) -> Vec<FrameRef> {
    let caps: Vec<usize> = cells.values().map(|v| v.len()).collect();
    let quota = water_fill(&caps, total);
    let mut out = Vec::with_capacity(total);
    for (frames, q) in cells.values().zip(quota) {
        let mut f = frames.clone();
        if q < f.len() {
            rng.shuffle(&mut f);
            f.truncate(q);
            f.sort_unstable();
        }
        out.extend(f);
    }
    out
}

fn build_part(manifest: &DatasetManifest, frames: &[FrameRef], task: &BinaryTask, rng: &mut Rng) -> Result<LabeledFrames> {
    let mut neg: BTreeMap<Cell, Vec<FrameRef>> = BTreeMap::new();
    let mut pos: BTreeMap<Cell, Vec<FrameRef>> = BTreeMap::new();
    for r in frames {
        let seg = &manifest.segments[r.segment as usize];
        if !task.accepts_distance(seg.distance_m) {
            continue;
        }
        let key = ((seg.distance_m * 1000.0).round() as i64, seg.label());
        if seg.label() == 0 {
            neg.entry(key).or_default().push(*r);
        } else if task.accepts_positive(seg.label()) {
            pos.entry(key).or_default().push(*r);
        }
    }
    let n_neg: usize = neg.values().map(Vec::len).sum();
    let n_pos: usize = pos.values().map(Vec::len).sum();
    if n_neg == 0 || n_pos == 0 {
        return Err(Error::Data(format!(
            "task {}: empty {} pool",
            task.id(),
            if n_neg == 0 { "negative (class-0)" } else { "positive" }
        )));
    }
    let per_side = n_neg.min(n_pos);
    let mut out = LabeledFrames::default();
    for (label, cells) in [(0u8, &neg), (1u8, &pos)] {
        for r in pick_balanced(cells, per_side, rng) {
            out.frames.push(r);
            out.labels.push(label);
        }
    }
    Ok(out)
}

/// Labeled, 50/50-balanced train/val/test sets for `task`. Where one side
/// is larger it is subsampled uniformly within (distance, class) cells
/// whose quotas are as equal as availability allows.
pub fn build_task_set(manifest: &DatasetManifest, splits: &Splits, task: &BinaryTask, seed: u64) -> Result<TaskSet> {
    let key = mix(seed ^ stable_hash(&task.id()));
    Ok(TaskSet {
        train: build_part(manifest, &splits.train, task, &mut Rng::derive(key, 1))?,
        val: build_part(manifest, &splits.val, task, &mut Rng::derive(key, 2))?,
        test: build_part(manifest, &splits.test, task, &mut Rng::derive(key, 3))?,
    })
}
