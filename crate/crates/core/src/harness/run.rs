use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bg::ResidualCorpus;
use crate::error::{Error, Result};
use crate::flow::{fit_baseline, flow_between, FarnebackParams, FramePyramid, GridSearch};
use crate::gasnet::{self, EpochRecord, FrameSet, GasNetVariant, TrainConfig, TrainedModel};
use crate::gvid::{DatasetManifest, Frame};
use crate::rng::mix;

use super::eval::{mean_std, score, EvalReport, SetSizes};
use super::split::{check_disjoint, FrameRef, SplitPlan, Splits};
use super::task::{build_task_set, stable_hash, Aggregation, BinaryTask, LabeledFrames, TaskSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detector {
    GasNet { variant: GasNetVariant, config: TrainConfig },
    Baseline { flow: FarnebackParams },
}

impl Detector {
    pub fn name(&self) -> &'static str {
        match self {
            Detector::GasNet { variant, .. } => variant.name(),
            Detector::Baseline { .. } => "baseline",
        }
    }
}

/// Preprocessed frames plus the shared frame partition.
pub struct ExperimentData<'a> {
    pub residual: &'a ResidualCorpus,
    pub splits: &'a Splits,
    /// Seeds the task sets; shared by every detector so comparisons see
    /// the same frames.
    pub seed: u64,
    video_of_segment: Vec<usize>,
}

impl<'a> ExperimentData<'a> {
    /// Audits `splits` against `plan`; task sets are seeded by `plan.seed`.
    pub fn new(residual: &'a ResidualCorpus, plan: &SplitPlan, splits: &'a Splits) -> Result<Self> {
        let corpus = &residual.corpus;
        check_disjoint(&corpus.manifest, plan, splits)?;
        let seed = plan.seed;
        let video_of_segment = corpus
            .manifest
            .segments
            .iter()
            .map(|s| {
                corpus
                    .video_index(&s.file_id)
                    .ok_or_else(|| Error::Data(format!("no video for {}", s.file_id.display())))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            residual,
            splits,
            seed,
            video_of_segment,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.residual.corpus.manifest
    }

    pub fn frame(&self, r: FrameRef) -> &Frame {
        &self.residual.corpus.videos[self.video_of_segment[r.segment as usize]].frames[r.frame as usize]
    }

    pub fn frame_set(&self, set: &LabeledFrames) -> FrameSet<'_> {
        FrameSet {
            frames: set.frames.iter().map(|&r| self.frame(r)).collect(),
            labels: set.labels.clone(),
        }
    }

    pub fn task_set(&self, task: &BinaryTask) -> Result<TaskSet> {
        build_task_set(self.manifest(), self.splits, task, self.seed)
    }

    /// Flow speeds for frame `r`, paired with its successor inside the
    /// segment, or with its predecessor at the segment's last frame.
    pub fn flow_speeds(&self, r: FrameRef, params: &FarnebackParams) -> Result<Vec<f32>> {
        let seg = &self.manifest().segments[r.segment as usize];
        let (a, b) = if r.frame + 1 < seg.end_frame {
            (r.frame, r.frame + 1)
        } else if r.frame > seg.start_frame {
            (r.frame - 1, r.frame)
        } else {
            return Err(Error::Data(format!("segment {} is too short for flow", r.segment)));
        };
        let fa = self.frame(FrameRef { frame: a, ..r });
        let fb = self.frame(FrameRef { frame: b, ..r });
        let prev = FramePyramid::new(fa, params)?;
        let next = FramePyramid::new(fb, params)?;
        Ok(flow_between(&prev, &next, params)?.speed())
    }

    fn speeds(&self, set: &LabeledFrames, params: &FarnebackParams) -> Result<Vec<Vec<f32>>> {
        set.frames.iter().map(|&r| self.flow_speeds(r, params)).collect()
    }
}

/// Seed of one experiment, fixed by what it is rather than when it runs.
pub fn experiment_seed(master: u64, task: &BinaryTask, detector: &Detector, bg_method: &str) -> u64 {
    mix(master ^ stable_hash(&format!("{}/{}/{}", task.id(), detector.name(), bg_method)))
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    /// One report, or for method 3 one per distance followed by the
    /// all-distance report.
    pub reports: Vec<EvalReport>,
    pub curve: Vec<EpochRecord>,
    pub grid: Option<GridSearch>,
    pub model: Option<TrainedModel>,
}

enum Fitted {
    Net(TrainedModel),
    Flow(crate::flow::BaselineModel),
}

impl Fitted {
    fn predict(&self, data: &ExperimentData, set: &LabeledFrames) -> Result<Vec<u8>> {
        match self {
            Fitted::Net(m) => {
                let fs = data.frame_set(set);
                Ok(m.predict(&fs.frames, &data.residual.provenance)?
                    .into_iter()
                    .map(|p| p.label)
                    .collect())
            }
            Fitted::Flow(b) => Ok(b.predict(&data.speeds(set, &b.flow)?)),
        }
    }
}

/// Trains (or grid-searches) `detector` on the task's train/val frames and
/// scores the single best model on the test frames and ten random folds
/// of them. Method-3 tasks are also scored on each distance's test frames.
pub fn run_experiment(data: &ExperimentData, task: &BinaryTask, detector: &Detector) -> Result<ExperimentOutput> {
    let bg = data.residual.provenance.method.name();
    let seed = experiment_seed(data.seed, task, detector, bg);
    let sets = data.task_set(task)?;
    let (fitted, curve, grid, val_accuracy, detail) = match detector {
        Detector::GasNet { variant, config } => {
            let config = TrainConfig {
                seed,
                ..config.clone()
            };
            let model = gasnet::train(
                *variant,
                &data.frame_set(&sets.train),
                &data.frame_set(&sets.val),
                &config,
                &data.residual.provenance,
            )?;
            let detail = json!({
                "variant": variant,
                "config": config,
                "best_epoch": model.best_epoch,
                "adam_steps": model.adam_steps,
            });
            let (curve, val) = (model.curve.clone(), model.val_accuracy);
            (Fitted::Net(model), curve, None, val, detail)
        }
        Detector::Baseline { flow } => {
            flow.validate()?;
            let (model, search) = fit_baseline(
                *flow,
                &data.speeds(&sets.train, flow)?,
                &data.speeds(&sets.val, flow)?,
                &sets.val.labels,
            )?;
            let detail = json!({
                "flow": flow,
                "mmt": model.thresholds.mmt,
                "pat": model.thresholds.pat,
            });
            let val = model.val_accuracy;
            (Fitted::Flow(model), Vec::new(), Some(search), val, detail)
        }
    };
    let provenance = json!({
        "detector": detail,
        "preprocessing": data.residual.provenance,
        "data_seed": data.seed,
    });
    let report = |t: &BinaryTask, test: &LabeledFrames, sizes: SetSizes| -> Result<EvalReport> {
        let predicted = fitted.predict(data, test)?;
        let (confusion, folds) = score(&predicted, &test.labels, seed)?;
        Ok(EvalReport {
            task: t.clone(),
            task_id: t.id(),
            detector: detector.name().into(),
            bg_method: bg.into(),
            accuracy_mean: confusion.accuracy(),
            accuracy_std: mean_std(&folds).1,
            fold_accuracies: folds,
            confusion,
            val_accuracy,
            sizes,
            seed,
            provenance: provenance.clone(),
        })
    };
    let sizes = SetSizes {
        train: sets.train.len(),
        val: sets.val.len(),
        test: sets.test.len(),
    };
    let mut reports = Vec::new();
    if task.method == Aggregation::Method3 && task.distance_m.is_none() {
        for &d in &data.manifest().distances_m {
            let sub = BinaryTask {
                distance_m: Some(d),
                ..task.clone()
            };
            let test = data.task_set(&sub)?.test;
            reports.push(report(
                &sub,
                &test,
                SetSizes {
                    test: test.len(),
                    ..sizes
                },
            )?);
        }
    }
    reports.push(report(task, &sets.test, sizes)?);
    Ok(ExperimentOutput {
        reports,
        curve,
        grid,
        model: match fitted {
            Fitted::Net(m) => Some(m),
            Fitted::Flow(_) => None,
        },
    })
}

/// Runs `jobs` in a pool of `threads` workers and returns the outputs in
/// job order. Models are dropped unless `keep_models`.
pub fn run_suite(
    data: &ExperimentData,
    jobs: &[(BinaryTask, Detector)],
    threads: usize,
    keep_models: bool,
) -> Result<Vec<ExperimentOutput>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(task, det)| {
                let mut out = run_experiment(data, task, det)?;
                if !keep_models {
                    out.model = None;
                }
                Ok(out)
            })
            .collect::<Vec<Result<_>>>()
    })
    .into_iter()
    .collect()
}

/// Mean accuracy over reports, with the matching population std of the
/// per-report means.
pub fn average_accuracy(reports: &[&EvalReport]) -> (f64, f64) {
    mean_std(&reports.iter().map(|r| r.accuracy_mean).collect::<Vec<_>>())
}
