//! Run configuration: preset defaults, overlaid by an optional JSON file,
//! overlaid by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use ogi_core::bg::MogParams;
use ogi_core::flow::FarnebackParams;
use ogi_core::gasnet::{GasNetVariant, TrainConfig};
use ogi_core::harness::{SplitMode, SplitPlan};
use ogi_core::synth::SynthConfig;
use ogi_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const OUTPUT_ROOT_ENV: &str = "OGI_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "ogi-out";
pub const SNAPSHOT_FILE: &str = "config.resolved.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperScale,
}

impl Preset {
    fn synth(self, seed: u64) -> SynthConfig {
        match self {
            Preset::Desk => SynthConfig::desk(seed),
            Preset::PaperScale => SynthConfig::paper_scale(seed),
        }
    }

    /// Moving-median window: 14 s at full scale, 4 s on the shorter desk
    /// segments.
    fn window(self) -> usize {
        match self {
            Preset::Desk => 60,
            Preset::PaperScale => 210,
        }
    }

    fn train(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::PaperScale => TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSection {
    pub method: String,
    pub window: usize,
    pub mog: MogParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSection {
    pub train_equipment: Vec<String>,
    pub test_equipment: Vec<String>,
    pub train_fraction: f64,
    pub mode: SplitMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub variant: GasNetVariant,
    #[serde(flatten)]
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub method: u8,
    /// `gasnet1|gasnet2|gasnet3|baseline`.
    pub detector: String,
    /// Background method of the residual corpus to evaluate on.
    pub bg: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub jobs: usize,
    pub output_root: PathBuf,
    pub synth: SynthConfig,
    pub preprocess: PreprocessSection,
    pub split: SplitSection,
    pub train: TrainSection,
    pub flow: FarnebackParams,
    pub eval: EvalSection,
}

/// Global settings given on the command line.
#[derive(Clone, Debug, Default)]
pub struct GlobalFlags {
    pub config: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

fn defaults(preset: Preset, seed: u64) -> RunConfig {
    let plan = SplitPlan::standard(seed);
    RunConfig {
        preset,
        seed,
        jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
        output_root: PathBuf::from(DEFAULT_OUTPUT_ROOT),
        synth: preset.synth(seed),
        preprocess: PreprocessSection {
            method: "moving".into(),
            window: preset.window(),
            mog: MogParams::default(),
        },
        split: SplitSection {
            train_equipment: plan.train_equipment,
            test_equipment: plan.test_equipment,
            train_fraction: plan.train_fraction,
            mode: plan.mode,
        },
        train: TrainSection {
            variant: GasNetVariant::GasNet2,
            config: preset.train(),
        },
        flow: FarnebackParams::default(),
        eval: EvalSection {
            method: 1,
            detector: "gasnet2".into(),
            bg: "moving".into(),
        },
    }
}

/// Recursively overlays `top` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Preset defaults, then the config file, then global flags and the
    /// output-root environment variable (flag first).
    pub fn resolve(flags: &GlobalFlags) -> Result<Self> {
        let file: Value = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let v: Value = serde_json::from_str(&text)?;
                if !v.is_object() {
                    return Err(Error::InvalidArgument(format!("{} must hold a JSON object", path.display())));
                }
                v
            }
            None => Value::Object(Default::default()),
        };
        let preset = match flags.preset {
            Some(p) => p,
            None => match file.get("preset") {
                Some(v) => serde_json::from_value(v.clone())?,
                None => Preset::Desk,
            },
        };
        let seed = match flags.seed {
            Some(s) => s,
            None => file.get("seed").and_then(Value::as_u64).unwrap_or(7),
        };
        let mut value = serde_json::to_value(defaults(preset, seed))?;
        merge(&mut value, file);
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::InvalidArgument(format!("config file: {e}")))?;
        cfg.preset = preset;
        if let Some(s) = flags.seed {
            cfg.seed = s;
            cfg.synth.seed = s;
        }
        if let Some(j) = flags.jobs {
            cfg.jobs = j;
        }
        if cfg.jobs == 0 {
            return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
        }
        if let Some(o) = &flags.output {
            cfg.output_root = o.clone();
        } else if let Ok(env) = std::env::var(OUTPUT_ROOT_ENV) {
            if !env.is_empty() {
                cfg.output_root = PathBuf::from(env);
            }
        }
        Ok(cfg)
    }

    pub fn plan(&self) -> SplitPlan {
        SplitPlan {
            train_equipment: self.split.train_equipment.clone(),
            test_equipment: self.split.test_equipment.clone(),
            train_fraction: self.split.train_fraction,
            seed: self.seed,
            mode: self.split.mode,
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output_root.join("dataset")
    }

    pub fn residual_dir(&self, method: &str) -> PathBuf {
        self.output_root.join("residual").join(method)
    }
}

/// Writes the resolved configuration beside a command's outputs.
pub fn write_snapshot(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let snapshot = serde_json::json!({ "command": command, "config": cfg });
    let path = dir.join(SNAPSHOT_FILE);
    let text = serde_json::to_string_pretty(&snapshot)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
