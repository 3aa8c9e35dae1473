//! `canids` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! validation error, 3 runtime or numeric error. Failures print one line to
//! stderr of the form `canids: error[<kind>]: <message>`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use canids::canbus::AttackKind;
use clap::{Parser, Subcommand};

use crate::commands::Failure;
use crate::config::CliConfig;

#[derive(Debug, Parser)]
#[command(name = "canids", version, about = "CAN intrusion detection pipeline")]
struct Cli {
    /// JSON configuration file; omitted sections use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configuration's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Writes 0 as the report timestamp so reports are reproducible.
    #[arg(long, global = true)]
    frozen_clock: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a benign log.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Seconds of traffic (overrides benign.duration).
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Inject DoS or fuzzing frames into a log.
    Inject {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        attack: AttackKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer-train a float model on a DoS log, then a fuzzing log.
    Train {
        #[arg(long)]
        dos: PathBuf,
        #[arg(long)]
        fuzz: PathBuf,
        /// Output float bundle directory.
        #[arg(long)]
        out: PathBuf,
        /// Training history and test reports (JSON).
        #[arg(long)]
        history: PathBuf,
        /// Epochs per phase (overrides train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// Per-epoch checkpoint directory (overrides train.checkpoint_dir).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Fold, calibrate and quantize a float bundle.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        /// Labelled log(s) supplying calibration and fine-tuning windows.
        #[arg(long, required = true)]
        calib: Vec<PathBuf>,
        /// Output quantized bundle directory.
        #[arg(long)]
        out: PathBuf,
        /// Calibration profile and scales (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a labelled log and write an evaluation report.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Attack kind; inferred from the log's labels when omitted.
        #[arg(long)]
        attack: Option<AttackKind>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Optional ROC points as CSV.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Measure per-frame latency and the CAN line-rate budget.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Log whose IDs are replayed; synthetic benign traffic otherwise.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Per-frame verdicts for a (possibly unlabelled) log.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = CliConfig::load(cli.config.as_deref()).map_err(Failure::Config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = commands::Context {
        frozen_clock: cli.frozen_clock,
    };
    match cli.command {
        Command::Generate { out, duration } => {
            if let Some(d) = duration {
                cfg.benign.duration = d;
            }
            cfg.validate().map_err(Failure::Config)?;
            commands::generate(&cfg, &out)
        }
        Command::Inject { input, attack, out } => {
            cfg.validate().map_err(Failure::Config)?;
            commands::inject(&cfg, &input, attack, &out)
        }
        Command::Train {
            dos,
            fuzz,
            out,
            history,
            epochs,
            checkpoints,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if checkpoints.is_some() {
                cfg.train.checkpoint_dir = checkpoints;
            }
            cfg.validate().map_err(Failure::Config)?;
            commands::train(&ctx, &cfg, &dos, &fuzz, &out, &history)
        }
        Command::Quantize { model, calib, out, report } => {
            cfg.validate().map_err(Failure::Config)?;
            commands::quantize(&ctx, &cfg, &model, &calib, &out, report.as_deref())
        }
        Command::Evaluate {
            model,
            log,
            attack,
            threshold,
            out,
            roc,
        } => {
            if let Some(t) = threshold {
                cfg.threshold = t;
            }
            cfg.validate().map_err(Failure::Config)?;
            commands::evaluate(&ctx, &cfg, &model, &log, attack, &out, roc.as_deref())
        }
        Command::Bench {
            model,
            out,
            log,
            reps,
            warmup,
        } => {
            if let Some(r) = reps {
                cfg.bench.reps = r;
            }
            if let Some(w) = warmup {
                cfg.bench.warmup = w;
            }
            cfg.validate().map_err(Failure::Config)?;
            commands::bench(&ctx, &cfg, &model, log.as_deref(), &out)
        }
        Command::Detect {
            model,
            log,
            out,
            threshold,
        } => {
            if let Some(t) = threshold {
                cfg.threshold = t;
            }
            cfg.validate().map_err(Failure::Config)?;
            commands::detect(&cfg, &model, &log, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("canids: error[usage]: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("canids: error[{}]: {}", f.tag(), f.message().replace('\n', " "));
            ExitCode::from(f.code())
        }
    }
}
