use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use canids::bench::{
    line_rate_budget, measure_latency, BenchReport, FloatFrameEngine, FrameEngine, HostInfo, MonotonicClock,
    QuantFrameEngine,
};
use canids::canbus::{parse_log, write_log, AttackKind, FrameLog, Label, ParseOptions};
use canids::eval::{evaluate_model, roc_auc, write_roc_csv, Classifier, EvalReport};
use canids::features::{stream_windows, LabeledWindow};
use canids::model_io::{self, Bundle};
use canids::quant::{calibrate, fine_tune_quantized, fold_batchnorm, quantize_model, CalibrationProfile};
use canids::trafgen::{gen_benign, inject_dos, inject_fuzzing, BenignProfile};
use canids::train::{split_dataset, transfer_train, TrainHistory};
use canids::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::CliConfig;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::Data(_) => "data",
            Failure::Runtime(_) => "runtime",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Parse { .. } | Error::Validation { .. } | Error::Domain(_) | Error::Bundle(_) => Failure::Data(msg),
            Error::Shape(_)
            | Error::Numeric(_)
            | Error::Usage(_)
            | Error::Training { .. }
            | Error::Quantization { .. }
            | Error::Io(_)
            | Error::Json(_) => Failure::Runtime(msg),
        }
    }
}

fn io_out(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

pub struct Context {
    pub frozen_clock: bool,
}

impl Context {
    fn timestamp(&self) -> u64 {
        if self.frozen_clock {
            return 0;
        }
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
    }
}

/// Common wrapper of every JSON report.
#[derive(Serialize)]
struct Envelope<'a, R> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    generated_at_unix: u64,
    config: &'a CliConfig,
    report: R,
}

fn write_report<R: Serialize>(ctx: &Context, cfg: &CliConfig, command: &'static str, report: R, path: &Path) -> Result<(), Failure> {
    let env = Envelope {
        tool: "canids",
        version: env!("CARGO_PKG_VERSION"),
        command,
        generated_at_unix: ctx.timestamp(),
        config: cfg,
        report,
    };
    let mut text = serde_json::to_string_pretty(&env).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    create_parent(path)?;
    fs::write(path, text).map_err(io_out(path))
}

fn create_parent(path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_out(dir))?;
    }
    Ok(())
}

fn read_log(path: &Path, opts: &ParseOptions) -> Result<FrameLog, Failure> {
    let file = File::open(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    parse_log(BufReader::new(file), opts).map_err(|e| match Failure::from(e) {
        Failure::Data(m) => Failure::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn save_log(log: &FrameLog, path: &Path) -> Result<(), Failure> {
    create_parent(path)?;
    let file = File::create(path).map_err(io_out(path))?;
    write_log(log, BufWriter::new(file)).map_err(io_out(path))
}

fn load_model(path: &Path) -> Result<Bundle, Failure> {
    model_io::load_bundle(path).map_err(|e| match e {
        Error::Io(io) => Failure::Data(format!("{}: {io}", path.display())),
        Error::Json(j) => Failure::Data(format!("{}: {j}", path.display())),
        other => Failure::Data(format!("{}: {other}", path.display())),
    })
}

fn last_timestamp(log: &FrameLog) -> f64 {
    log.frames().last().map_or(0.0, |f| f.timestamp())
}

pub fn generate(cfg: &CliConfig, out: &Path) -> Result<(), Failure> {
    let log = gen_benign(&cfg.benign_profile())?;
    save_log(&log, out)
}

pub fn inject(cfg: &CliConfig, input: &Path, attack: AttackKind, out: &Path) -> Result<(), Failure> {
    let log = read_log(input, &ParseOptions::default())?;
    let span = last_timestamp(&log);
    let injected = match attack {
        AttackKind::Dos => inject_dos(&log, &cfg.dos_params(span))?,
        AttackKind::Fuzzing => inject_fuzzing(&log, &cfg.fuzz_params(span))?,
    };
    save_log(&injected, out)
}

fn labelled_windows(path: &Path, hint: Option<AttackKind>) -> Result<Vec<LabeledWindow>, Failure> {
    let opts = ParseOptions {
        plain_t_as: hint,
        allow_missing_flag: false,
    };
    Ok(stream_windows(&read_log(path, &opts)?))
}

#[derive(Serialize)]
struct SplitSizes {
    train: usize,
    val: usize,
    test: usize,
}

#[derive(Serialize)]
struct TrainReport {
    model_digest: String,
    param_count: usize,
    dos_windows: SplitSizes,
    fuzz_windows: SplitSizes,
    dos_history: TrainHistory,
    fuzz_history: TrainHistory,
    phase1_dos_report: EvalReport,
    dos_report: EvalReport,
    fuzz_report: EvalReport,
}

pub fn train(ctx: &Context, cfg: &CliConfig, dos: &Path, fuzz: &Path, out: &Path, history: &Path) -> Result<(), Failure> {
    let tcfg = cfg.train_config();
    let dos_split = split_dataset(&labelled_windows(dos, Some(AttackKind::Dos))?, &tcfg)?;
    let fuzz_split = split_dataset(&labelled_windows(fuzz, Some(AttackKind::Fuzzing))?, &tcfg)?;
    let outcome = transfer_train(&cfg.arch, &tcfg, &dos_split, &fuzz_split)?;
    model_io::save_float(&outcome.model, out)?;
    let sizes = |s: &canids::train::DatasetSplit| SplitSizes {
        train: s.train.len(),
        val: s.val.len(),
        test: s.test.len(),
    };
    let report = TrainReport {
        model_digest: outcome.model.digest(),
        param_count: outcome.model.param_count(),
        dos_windows: sizes(&dos_split),
        fuzz_windows: sizes(&fuzz_split),
        dos_history: outcome.dos_history,
        fuzz_history: outcome.fuzz_history,
        phase1_dos_report: outcome.phase1_dos_report,
        dos_report: outcome.dos_report,
        fuzz_report: outcome.fuzz_report,
    };
    write_report(ctx, cfg, "train", report, history)
}

#[derive(Serialize)]
struct QuantizeReport {
    float_digest: String,
    quant_digest: String,
    profile: CalibrationProfile,
    scales: canids::quant::QuantScales,
    fine_tune_epochs: usize,
}

pub fn quantize(
    ctx: &Context,
    cfg: &CliConfig,
    model: &Path,
    calib: &[std::path::PathBuf],
    out: &Path,
    report: Option<&Path>,
) -> Result<(), Failure> {
    let float = match load_model(model)? {
        Bundle::Float(m) => m,
        Bundle::Quant(_) => return Err(Failure::Data(format!("{} is already quantized", model.display()))),
    };
    let mut windows = Vec::new();
    for path in calib {
        windows.extend(labelled_windows(path, Some(AttackKind::Dos))?);
    }
    if windows.is_empty() {
        return Err(Failure::Data("calibration logs produced no windows".into()));
    }
    let mut sample: Vec<LabeledWindow> = windows.clone();
    sample.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4)));
    sample.truncate(cfg.quant.calibration_windows);
    let inputs: Vec<_> = sample.iter().map(|w| w.tensor).collect();
    let folded = fold_batchnorm(&float)?;
    let profile = calibrate(&folded, &inputs)?;
    let qm = if cfg.quant.fine_tune.epochs > 0 {
        let ft = canids::quant::FineTuneConfig {
            seed: cfg.quant.fine_tune.seed.wrapping_add(cfg.seed),
            ..cfg.quant.fine_tune.clone()
        };
        fine_tune_quantized(&folded, &profile, &windows, &ft)?.1
    } else {
        quantize_model(&folded, &profile)?
    };
    model_io::save_quant(&qm, out)?;
    if let Some(path) = report {
        let r = QuantizeReport {
            float_digest: float.digest(),
            quant_digest: qm.digest(),
            profile,
            scales: qm.scales(),
            fine_tune_epochs: cfg.quant.fine_tune.epochs,
        };
        write_report(ctx, cfg, "quantize", r, path)?;
    }
    Ok(())
}

fn infer_attack(log: &FrameLog) -> Result<AttackKind, Failure> {
    let dos = log.count_label(Label::DosAttack);
    let fuzz = log.count_label(Label::FuzzingAttack);
    match (dos > 0, fuzz > 0) {
        (true, false) => Ok(AttackKind::Dos),
        (false, true) => Ok(AttackKind::Fuzzing),
        _ => Err(Failure::Data("cannot infer the attack kind from the log; pass --attack".into())),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    ctx: &Context,
    cfg: &CliConfig,
    model: &Path,
    log_path: &Path,
    attack: Option<AttackKind>,
    out: &Path,
    roc: Option<&Path>,
) -> Result<(), Failure> {
    let bundle = load_model(model)?;
    let opts = ParseOptions {
        plain_t_as: attack,
        allow_missing_flag: false,
    };
    let log = read_log(log_path, &opts)?;
    let attack = match attack {
        Some(a) => a,
        None => infer_attack(&log)?,
    };
    let windows = stream_windows(&log);
    let classifier: &dyn Classifier = match &bundle {
        Bundle::Float(m) => m,
        Bundle::Quant(q) => q,
    };
    let report = evaluate_model(classifier, &windows, attack, cfg.threshold)?;
    if let Some(path) = roc {
        let inputs: Vec<_> = windows.iter().map(|w| w.tensor).collect();
        let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
        let curve = roc_auc(&classifier.scores(&inputs)?, &labels)?;
        create_parent(path)?;
        let file = File::create(path).map_err(io_out(path))?;
        write_roc_csv(&curve, BufWriter::new(file)).map_err(io_out(path))?;
    }
    write_report(ctx, cfg, "evaluate", report, out)
}

pub fn bench(ctx: &Context, cfg: &CliConfig, model: &Path, log: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let bundle = load_model(model)?;
    let frames = match log {
        Some(p) => read_log(
            p,
            &ParseOptions {
                plain_t_as: Some(AttackKind::Dos),
                allow_missing_flag: true,
            },
        )?,
        None => gen_benign(&BenignProfile::vehicle_like(2.0, cfg.seed))?,
    };
    let ids: Vec<u16> = frames.frames().iter().map(|f| f.id()).collect();
    let b = &cfg.bench;
    let mut clock = MonotonicClock::new();
    let (engine, stats) = match &bundle {
        Bundle::Float(m) => {
            let mut e = FloatFrameEngine::new(m);
            let s = measure_latency(&mut e, &ids, b.reps, b.warmup, cfg.threshold, &mut clock)?;
            (e.kind(), s)
        }
        Bundle::Quant(q) => {
            let mut e = QuantFrameEngine::new(q);
            let s = measure_latency(&mut e, &ids, b.reps, b.warmup, cfg.threshold, &mut clock)?;
            (e.kind(), s)
        }
    };
    let budget = line_rate_budget(&stats, b.bitrate, b.dlc, b.stuffed)?;
    let report = BenchReport {
        engine: engine.into(),
        reps: b.reps,
        warmup: b.warmup,
        stats,
        budget,
        host: HostInfo::current(),
    };
    write_report(ctx, cfg, "bench", report, out)
}

pub fn detect(cfg: &CliConfig, model: &Path, log_path: &Path, out: &Path) -> Result<(), Failure> {
    let bundle = load_model(model)?;
    let opts = ParseOptions {
        plain_t_as: Some(AttackKind::Dos),
        allow_missing_flag: true,
    };
    let log = read_log(log_path, &opts)?;
    let mut engine: Box<dyn FrameEngine + '_> = match &bundle {
        Bundle::Float(m) => Box::new(FloatFrameEngine::new(m)),
        Bundle::Quant(q) => Box::new(QuantFrameEngine::new(q)),
    };
    create_parent(out)?;
    let file = File::create(out).map_err(io_out(out))?;
    let mut w = BufWriter::new(file);
    let werr = io_out(out);
    writeln!(w, "timestamp,id,score,verdict").map_err(&werr)?;
    for f in log.frames() {
        if let Some(score) = engine.push_frame(f.id())? {
            let verdict = if score >= cfg.threshold { "attack" } else { "normal" };
            writeln!(w, "{:.6},{:04x},{score:.6},{verdict}", f.timestamp(), f.id()).map_err(&werr)?;
        }
    }
    w.flush().map_err(&werr)
}
