mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ogi_core::gasnet::GasNetVariant;
use ogi_core::Error;

use commands::TaskArgs;
use config::{GlobalFlags, Preset, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "ogi", version, about = "Leak detection in optical gas imaging video")]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root (default: $OGI_OUTPUT_ROOT, else ./ogi-out).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus: containers plus manifest.
    Synth {
        /// Dataset directory (default: <output>/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Background-subtract a corpus into a residual corpus.
    Preprocess {
        /// none|fixed|moving|mog
        #[arg(long)]
        method: Option<String>,
        /// Moving-median window in frames.
        #[arg(long)]
        window: Option<usize>,
        /// Source dataset directory (default: <output>/dataset).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Residual directory (default: <output>/residual/<method>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one GasNet on one binary task and save the checkpoint.
    Train {
        #[command(flatten)]
        task: TaskFlags,
        /// gasnet1|gasnet2|gasnet3
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Fit the optical-flow baseline on one binary task.
    Baseline {
        #[command(flatten)]
        task: TaskFlags,
    },
    /// Run every task of one aggregation method.
    Eval {
        /// Aggregation method: 1 (distance x class), 2 (per distance), 3 (global).
        #[arg(long)]
        method: Option<u8>,
        /// gasnet1|gasnet2|gasnet3|baseline
        #[arg(long)]
        detector: Option<String>,
        /// Residual corpus: none|fixed|moving|mog
        #[arg(long)]
        bg: Option<String>,
        /// Moving-median window the residual corpus was built with.
        #[arg(long)]
        window: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Merge eval records into curves and the method-comparison table.
    Curves {
        /// Detector whose records are merged.
        #[arg(long)]
        detector: Option<String>,
        /// Background method of the comparison table.
        #[arg(long)]
        bg: Option<String>,
    },
    /// Finite-difference gradient check of the GasNet variants.
    Gradcheck {
        /// Variant to check; repeatable (default: all).
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
}

#[derive(Args, Debug)]
struct TaskFlags {
    /// Aggregation method: 1, 2 or 3.
    #[arg(long, default_value_t = 1)]
    method: u8,
    /// Imaging distance in metres (methods 1 and 2).
    #[arg(long)]
    distance: Option<f64>,
    /// Positive leak class 1..=7 (method 1).
    #[arg(long)]
    class: Option<u8>,
    /// Residual corpus: none|fixed|moving|mog
    #[arg(long)]
    bg: Option<String>,
    /// Moving-median window the residual corpus was built with.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train.config;
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(lr) = self.lr {
            t.lr = lr;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
    }
}

impl TaskFlags {
    fn apply(&self, cfg: &mut RunConfig) -> TaskArgs {
        if let Some(bg) = &self.bg {
            cfg.eval.bg = bg.clone();
        }
        if let Some(w) = self.window {
            cfg.preprocess.window = w;
        }
        cfg.eval.method = self.method;
        TaskArgs {
            method: self.method,
            distance: self.distance,
            class: self.class,
        }
    }
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Divergence(_) => EXIT_NUMERIC,
        Error::Io { .. } | Error::Json(_) | Error::Format(_) | Error::Data(_) | Error::Shape(_) => EXIT_DATA,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let flags = GlobalFlags {
        config: cli.config,
        output: cli.output,
        preset: cli.preset,
        seed: cli.seed,
        jobs: cli.jobs,
    };
    let mut cfg = RunConfig::resolve(&flags)?;
    match cli.command {
        Command::Synth { out } => commands::synth(&cfg, out)?,
        Command::Preprocess {
            method,
            window,
            data,
            out,
        } => {
            if let Some(m) = method {
                cfg.preprocess.method = m;
            }
            if let Some(w) = window {
                cfg.preprocess.window = w;
            }
            commands::preprocess(&cfg, data, out)?
        }
        Command::Train { task, variant, train } => {
            let task = task.apply(&mut cfg);
            if let Some(v) = variant {
                cfg.train.variant = GasNetVariant::parse(&v)?;
            }
            train.apply(&mut cfg);
            commands::train(&cfg, &task)?
        }
        Command::Baseline { task } => {
            let task = task.apply(&mut cfg);
            cfg.eval.detector = "baseline".into();
            commands::baseline(&cfg, &task)?
        }
        Command::Eval {
            method,
            detector,
            bg,
            window,
            train,
        } => {
            if let Some(m) = method {
                cfg.eval.method = m;
            }
            if let Some(d) = detector {
                cfg.eval.detector = d;
            }
            if let Some(b) = bg {
                cfg.eval.bg = b;
            }
            if let Some(w) = window {
                cfg.preprocess.window = w;
            }
            train.apply(&mut cfg);
            commands::eval(&cfg)?
        }
        Command::Curves { detector, bg } => {
            if let Some(d) = detector {
                cfg.eval.detector = d;
            }
            if let Some(b) = bg {
                cfg.eval.bg = b;
            }
            commands::curves(&cfg)?
        }
        Command::Gradcheck { variants } => {
            let variants = if variants.is_empty() {
                GasNetVariant::ALL.to_vec()
            } else {
                variants.iter().map(|v| GasNetVariant::parse(v)).collect::<Result<_, _>>()?
            };
            if !commands::gradcheck(&cfg, &variants)? {
                return Ok(ExitCode::from(EXIT_NUMERIC));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
