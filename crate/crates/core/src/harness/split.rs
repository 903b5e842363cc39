use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gvid::{trim_segment, DatasetManifest};
use crate::rng::{mix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Frames of each segment are shuffled before the train/val cut.
    Random,
    /// Each segment is cut once in time: the head trains, the tail validates.
    Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_equipment: Vec<String>,
    pub test_equipment: Vec<String>,
    pub train_fraction: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl SplitPlan {
    /// Train on `sep2`, test on `sep1`, 80/20 frame-random.
    pub fn standard(seed: u64) -> Self {
        Self {
            train_equipment: vec!["sep2".into()],
            test_equipment: vec!["sep1".into()],
            train_fraction: 0.8,
            seed,
            mode: SplitMode::Random,
        }
    }
}

/// One usable frame: its segment (index into the manifest) and absolute
/// frame number inside the segment's container.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameRef {
    pub segment: u32,
    pub frame: u32,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<FrameRef>,
    pub val: Vec<FrameRef>,
    pub test: Vec<FrameRef>,
}

/// Published per-case split sizes at full scale (training, validation,
/// test frames) by distance, reported beside ours for scale comparison.
pub const REFERENCE_SPLIT_SIZES: [(f64, usize, usize, usize); 5] = [
    (4.6, 11369, 2843, 9466),
    (6.9, 11362, 2841, 9467),
    (9.8, 11089, 2773, 9480),
    (12.6, 11361, 2841, 9476),
    (15.6, 11367, 2842, 9483),
];

/// Partitions the trimmed frames of every segment. Frames before
/// `warmup_frames` in their container are dropped. Train-equipment
/// segments are split `train_fraction : rest` per segment (so every class
/// is represented on both sides); test-equipment segments go to test.
pub fn make_splits(manifest: &DatasetManifest, warmup_frames: usize, plan: &SplitPlan) -> Result<Splits> {
    if !(plan.train_fraction > 0.0 && plan.train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {} leaves an empty training or validation set",
            plan.train_fraction
        )));
    }
    for group in [&plan.train_equipment, &plan.test_equipment] {
        if group.is_empty() || !group.iter().all(|e| manifest.segments.iter().any(|s| &s.equipment_id == e)) {
            return Err(Error::Data(format!("equipment group {group:?} is absent from the manifest")));
        }
    }
    if plan.train_equipment.iter().any(|e| plan.test_equipment.contains(e)) {
        return Err(Error::InvalidArgument("train and test equipment overlap".into()));
    }
    let mut out = Splits::default();
    for (si, seg) in manifest.segments.iter().enumerate() {
        let is_train = plan.train_equipment.contains(&seg.equipment_id);
        let is_test = plan.test_equipment.contains(&seg.equipment_id);
        if !is_train && !is_test {
            continue;
        }
        let t = trim_segment(seg, manifest)?;
        let mut frames: Vec<FrameRef> = (t.start_frame.max(warmup_frames as u32)..t.end_frame)
            .map(|frame| FrameRef {
                segment: si as u32,
                frame,
            })
            .collect();
        if is_test {
            out.test.extend(frames);
            continue;
        }
        if plan.mode == SplitMode::Random {
            Rng::derive(plan.seed, mix(si as u64 ^ 0x5e9)).shuffle(&mut frames);
        }
        let n_train = (frames.len() as f64 * plan.train_fraction).round() as usize;
        let (tr, va) = frames.split_at(n_train);
        out.train.extend_from_slice(tr);
        out.val.extend_from_slice(va);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    if out.val.is_empty() || out.train.is_empty() || out.test.is_empty() {
        return Err(Error::Data("a split came out empty".into()));
    }
    check_disjoint(manifest, plan, &out)?;
    Ok(out)
}

/// Leakage audit: pairwise disjoint sets, and test frames only from test
/// equipment (train/val only from train equipment).
pub fn check_disjoint(manifest: &DatasetManifest, plan: &SplitPlan, s: &Splits) -> Result<()> {
    let mut all: Vec<FrameRef> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    let n = all.len();
    all.sort_unstable();
    all.dedup();
    if all.len() != n {
        return Err(Error::Data("train/val/test sets overlap".into()));
    }
    let eq = |r: &FrameRef| &manifest.segments[r.segment as usize].equipment_id;
    if s.test.iter().any(|r| !plan.test_equipment.contains(eq(r)))
        || s.train.iter().chain(&s.val).any(|r| !plan.train_equipment.contains(eq(r)))
    {
        return Err(Error::Data("a split references the wrong equipment group".into()));
    }
    Ok(())
}
