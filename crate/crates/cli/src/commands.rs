use std::fs;
use std::path::{Path, PathBuf};

use ogi_core::bg::{preprocess_corpus, BgMethod, ResidualCorpus};
use ogi_core::gasnet::{build, curve_csv, GasNetVariant};
use ogi_core::harness::{
    emit_curves, make_splits, method1_tasks, method2_tasks, run_suite, table4, table4_csv, Aggregation, BinaryTask,
    Detector, EvalReport, ExperimentData, ExperimentOutput,
};
use ogi_core::nn::gradcheck::{grad_check, GradCheckConfig};
use ogi_core::nn::Tensor;
use ogi_core::rng::Rng;
use ogi_core::synth::render_dataset;
use ogi_core::corpus::MANIFEST_FILE;
use ogi_core::gvid::same_distance;
use ogi_core::{Corpus, DatasetManifest, Error, Result};
use serde::Serialize;

use crate::config::{write_snapshot, RunConfig};

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn synth(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.dataset_dir());
    let manifest = render_dataset(&cfg.synth, &dir)?;
    write_snapshot(&dir, "synth", cfg)?;
    let frames: u64 = manifest.segments.iter().map(|s| u64::from(s.len())).sum();
    println!(
        "wrote {} containers, {} segments, {} frames of {}x{} to {}",
        manifest.files().len(),
        manifest.segments.len(),
        frames,
        cfg.synth.width,
        cfg.synth.height,
        dir.display()
    );
    Ok(())
}

pub fn bg_method(cfg: &RunConfig, name: &str) -> Result<BgMethod> {
    match BgMethod::parse(name, cfg.preprocess.window)? {
        BgMethod::Mog(_) => Ok(BgMethod::Mog(cfg.preprocess.mog)),
        m => Ok(m),
    }
}

pub fn preprocess(cfg: &RunConfig, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let method = bg_method(cfg, &cfg.preprocess.method)?;
    let data = data.unwrap_or_else(|| cfg.dataset_dir());
    let out = out.unwrap_or_else(|| cfg.residual_dir(method.name()));
    let corpus = Corpus::load(&data)?;
    let residual = preprocess_corpus(&corpus, &method)?;
    residual.save(&out)?;
    write_snapshot(&out, "preprocess", cfg)?;
    println!(
        "{}: {} containers preprocessed, {} warmup frames per container, written to {}",
        method.name(),
        residual.corpus.videos.len(),
        residual.provenance.warmup_frames,
        out.display()
    );
    Ok(())
}

/// Task selection shared by `train` and `baseline`.
#[derive(Clone, Debug)]
pub struct TaskArgs {
    pub method: u8,
    pub distance: Option<f64>,
    pub class: Option<u8>,
}

impl TaskArgs {
    fn task(&self) -> Result<BinaryTask> {
        let need_distance = || {
            self.distance
                .ok_or_else(|| Error::InvalidArgument(format!("method {} needs --distance", self.method)))
        };
        match Aggregation::parse(self.method)? {
            Aggregation::Method1 => {
                let c = self
                    .class
                    .ok_or_else(|| Error::InvalidArgument("method 1 needs --class".into()))?;
                if c == 0 {
                    return Err(Error::InvalidArgument("--class must be a leak class 1..=7".into()));
                }
                Ok(BinaryTask::method1(need_distance()?, c))
            }
            Aggregation::Method2 => Ok(BinaryTask::method2(need_distance()?)),
            Aggregation::Method3 => Ok(BinaryTask::method3()),
        }
    }
}

fn load_residual(cfg: &RunConfig, bg: &str) -> Result<ResidualCorpus> {
    let method = bg_method(cfg, bg)?;
    let dir = cfg.residual_dir(method.name());
    let residual = ResidualCorpus::load(&dir)?;
    if residual.provenance.method != method {
        return Err(Error::Data(format!(
            "{} holds {:?} residuals, configuration asks for {:?}; rerun preprocess",
            dir.display(),
            residual.provenance.method,
            method
        )));
    }
    Ok(residual)
}

fn run_jobs(cfg: &RunConfig, bg: &str, jobs: &[(BinaryTask, Detector)], keep_models: bool) -> Result<Vec<ExperimentOutput>> {
    let residual = load_residual(cfg, bg)?;
    let plan = cfg.plan();
    let splits = make_splits(&residual.corpus.manifest, residual.provenance.warmup_frames, &plan)?;
    let data = ExperimentData::new(&residual, &plan, &splits)?;
    run_suite(&data, jobs, cfg.jobs, keep_models)
}

fn print_report(r: &EvalReport) {
    println!(
        "{:<14} {:<9} {:<7} acc {:.4} ± {:.4} (val {:.4}, test n={})",
        r.task_id, r.detector, r.bg_method, r.accuracy_mean, r.accuracy_std, r.val_accuracy, r.sizes.test
    );
}

pub fn train(cfg: &RunConfig, task: &TaskArgs) -> Result<()> {
    let task = task.task()?;
    cfg.train.config.validate()?;
    let variant = cfg.train.variant;
    let bg = &cfg.eval.bg;
    let det = Detector::GasNet {
        variant,
        config: cfg.train.config.clone(),
    };
    let mut out = run_jobs(cfg, bg, &[(task.clone(), det)], true)?.remove(0);
    let dir = cfg
        .output_root
        .join("train")
        .join(format!("{}-{}-{}", task.id(), variant.name(), bg));
    let model = out.model.take().expect("models are kept");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    model.save(&dir.join("model.ckpt"))?;
    write(&dir.join("curve.csv"), &model.curve_csv())?;
    write_json(&dir.join("result.json"), &out.reports)?;
    write_snapshot(&dir, "train", cfg)?;
    out.reports.iter().for_each(print_report);
    println!("best epoch {} of {}, written to {}", model.best_epoch, model.curve.len(), dir.display());
    Ok(())
}

pub fn baseline(cfg: &RunConfig, task: &TaskArgs) -> Result<()> {
    let task = task.task()?;
    let bg = &cfg.eval.bg;
    let det = Detector::Baseline { flow: cfg.flow };
    let out = run_jobs(cfg, bg, &[(task.clone(), det)], false)?.remove(0);
    let dir = cfg.output_root.join("baseline").join(format!("{}-{}", task.id(), bg));
    if let Some(grid) = &out.grid {
        write(&dir.join("grid.csv"), &grid.to_csv())?;
    }
    write_json(&dir.join("result.json"), &out.reports)?;
    write_snapshot(&dir, "baseline", cfg)?;
    out.reports.iter().for_each(print_report);
    println!("written to {}", dir.display());
    Ok(())
}

fn detector(cfg: &RunConfig, name: &str) -> Result<Detector> {
    if name == "baseline" {
        return Ok(Detector::Baseline { flow: cfg.flow });
    }
    cfg.train.config.validate()?;
    Ok(Detector::GasNet {
        variant: GasNetVariant::parse(name)?,
        config: cfg.train.config.clone(),
    })
}

pub fn eval_dir(cfg: &RunConfig) -> PathBuf {
    let e = &cfg.eval;
    cfg.output_root
        .join("eval")
        .join(format!("m{}-{}-{}", e.method, e.detector, e.bg))
}

/// Runs every task of the configured aggregation method and writes one
/// record per report plus the run's curves and table.
pub fn eval(cfg: &RunConfig) -> Result<()> {
    let e = &cfg.eval;
    let method = Aggregation::parse(e.method)?;
    let det = detector(cfg, &e.detector)?;
    let manifest = DatasetManifest::load(&cfg.residual_dir(bg_method(cfg, &e.bg)?.name()).join(MANIFEST_FILE))?;
    let tasks = match method {
        Aggregation::Method1 => method1_tasks(&manifest),
        Aggregation::Method2 => method2_tasks(&manifest),
        Aggregation::Method3 => vec![BinaryTask::method3()],
    };
    let jobs: Vec<_> = tasks.into_iter().map(|t| (t, det.clone())).collect();
    let outputs = run_jobs(cfg, &e.bg, &jobs, false)?;
    let dir = eval_dir(cfg);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
    }
    let mut reports = Vec::new();
    for out in &outputs {
        let id = &out.reports.last().expect("one report per experiment").task_id;
        if !out.curve.is_empty() {
            write(&dir.join("training").join(format!("{id}.csv")), &curve_csv(&out.curve))?;
        }
        if let Some(grid) = &out.grid {
            write(&dir.join("grids").join(format!("{id}.csv")), &grid.to_csv())?;
        }
        reports.extend(out.reports.iter().cloned());
    }
    for (i, r) in reports.iter().enumerate() {
        write_json(&dir.join("records").join(format!("{i:03}_{}.json", r.task_id)), r)?;
    }
    write(&dir.join("curves.csv"), &emit_curves(&reports))?;
    write(&dir.join("table4.csv"), &table4_csv(&table4(&reports, &manifest.distances_m)))?;
    write_snapshot(&dir, "eval", cfg)?;
    reports.iter().for_each(print_report);
    println!("{} records written to {}", reports.len(), dir.display());
    Ok(())
}

/// Merges the records of every eval run of `detector` under the output
/// root into one curves file and one method-comparison table on `bg`.
pub fn curves(cfg: &RunConfig) -> Result<()> {
    let root = cfg.output_root.join("eval");
    let mut runs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .map(|d| d.map(|d| d.path()).map_err(|e| Error::io(&root, e)))
        .collect::<Result<_>>()?;
    runs.sort();
    let mut reports: Vec<EvalReport> = Vec::new();
    for run in runs {
        let rec = run.join("records");
        if !rec.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&rec)
            .map_err(|e| Error::io(&rec, e))?
            .map(|d| d.map(|d| d.path()).map_err(|e| Error::io(&rec, e)))
            .collect::<Result<_>>()?;
        files.sort();
        for f in files.iter().filter(|f| f.extension().is_some_and(|x| x == "json")) {
            let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
            let r: EvalReport = serde_json::from_str(&text)?;
            if r.detector == cfg.eval.detector {
                reports.push(r);
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::Data(format!(
            "no {} eval records under {}",
            cfg.eval.detector,
            root.display()
        )));
    }
    let mut distances: Vec<f64> = Vec::new();
    for d in reports.iter().filter_map(|r| r.task.distance_m) {
        if !distances.iter().any(|&x| same_distance(x, d)) {
            distances.push(d);
        }
    }
    distances.sort_by(f64::total_cmp);
    let on_bg: Vec<EvalReport> = reports.iter().filter(|r| r.bg_method == cfg.eval.bg).cloned().collect();
    let dir = cfg.output_root.join("curves");
    write(&dir.join("curves.csv"), &emit_curves(&reports))?;
    let rows = table4(&on_bg, &distances);
    write(&dir.join("table4.csv"), &table4_csv(&rows))?;
    write_snapshot(&dir, "curves", cfg)?;
    println!("{} records merged into {}", reports.len(), dir.display());
    print!("{}", table4_csv(&rows));
    Ok(())
}

/// Finite-difference check of every requested variant on a 24x32 batch.
/// Returns whether all passed.
pub fn gradcheck(cfg: &RunConfig, variants: &[GasNetVariant]) -> Result<bool> {
    let (n, h, w) = (4, 24, 32);
    let mut rng = Rng::new(cfg.seed);
    let x = Tensor::new(vec![n, 1, h, w], (0..n * h * w).map(|_| rng.uniform_range(-1.0, 1.0)).collect())?;
    let labels = [0, 1, 1, 0];
    let check = GradCheckConfig {
        seed: cfg.seed,
        ..GradCheckConfig::default()
    };
    let mut all = true;
    for &v in variants {
        let net = build::<f64>(v, h, w, cfg.train.config.dropout_rate, cfg.seed)?;
        let report = grad_check(&net, &x, &labels, &check)?;
        println!(
            "{} {}: max rel error {:.3e} over {} probes ({} skipped), tolerance {:.0e}",
            if report.passed { "PASS" } else { "FAIL" },
            v.name(),
            report.max_rel_error,
            report.probed,
            report.skipped,
            report.tolerance
        );
        all &= report.passed;
    }
    Ok(all)
}
