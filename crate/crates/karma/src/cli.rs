//! Command-line surface: `synth`, `train`, `eval`, `audit`, `gradcheck`.
//!
//! Every event is one line of space-separated `key=value` pairs on stdout.
//! Failures print a single `event=error kind=... message="..."` line on
//! stderr; usage errors exit with 2, everything else with 1.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use karma_core::metrics::{compute_metrics, ConfusionMatrix, SegMetrics, ZeroSupport};
use karma_core::train::{evaluate, fit, Dataset};
use karma_core::{audit, gradcheck, Model};

use crate::config::{Config, ConfigError, SEED_ENV};
use crate::store::{load_checkpoint, read_dataset, save_checkpoint, write_dataset, StoreError};

#[derive(Parser, Debug)]
#[command(name = "karma", version, about = "Low-rank KAN segmentation: data, training, evaluation and cost audit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// Config file (`key = value`, `[section]` headers, `#` comments).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cell: Option<usize>,
    },
    /// Train a model; writes `best/`, `final/` and `train.log` under `--out`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "batch-size")]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluation worker threads; 1 is fully deterministic.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        /// `all`, `train` or `val` (every fifth sample).
        #[arg(long, default_value = "all")]
        split: String,
        /// Treat classes absent from the ground truth as `zero` or `exclude` them.
        #[arg(long = "zero-support", default_value = "zero")]
        zero_support: String,
        #[arg(long = "batch-size", default_value_t = 8)]
        batch_size: usize,
    },
    /// Parameter, FLOP and activation-memory report.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        /// Square input side; overridden by --height/--width.
        #[arg(long, default_value_t = 256)]
        res: usize,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient suites.
    Gradcheck {
        /// `ops`, `spline`, `kan`, `loss`, `model` or `all`.
        #[arg(long, default_value = "all")]
        module: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Core(#[from] karma_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) | CliError::Config(ConfigError::UnknownKey { .. }) => "usage",
            CliError::Config(_) => "config",
            CliError::Store(_) => "format",
            CliError::Core(_) => "core",
            CliError::Io(_) => "io",
            CliError::Failed(_) => "failed",
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.kind() == "usage" {
            2
        } else {
            1
        }
    }

    /// The single diagnostic line printed on failure.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        format!("event=error kind={} message=\"{}\"", self.kind(), msg)
    }
}

/// Parses `args` (program name first), turning clap failures into usage
/// errors that list the valid flags. `Ok(None)` means help or version was shown.
pub fn parse(args: &[String]) -> Result<Option<Cli>, CliError> {
    match Cli::try_parse_from(args) {
        Ok(c) => Ok(Some(c)),
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) => {
            let _ = e.print();
            Ok(None)
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            let mut cmd = Cli::command();
            let sub = args.get(1).and_then(|s| cmd.find_subcommand_mut(s).map(|c| c.clone()));
            let flags: Vec<String> = match &sub {
                Some(c) => c.get_arguments().filter_map(|a| a.get_long().map(|l| format!("--{}", l))).collect(),
                None => cmd.get_subcommands().map(|c| c.get_name().to_string()).collect(),
            };
            Err(CliError::Usage(format!("{}; valid: {}", first, flags.join(" "))))
        }
    }
}

fn load_config(common: &Common) -> Result<Config, CliError> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for s in &common.set {
        cfg.set_dotted(s)?;
    }
    Ok(cfg)
}

fn finish_config(cfg: &mut Config) -> Result<(), CliError> {
    cfg.apply_seed_env(std::env::var(SEED_ENV).ok())?;
    Ok(())
}

fn flag<T: ToString>(cfg: &mut Config, section: &str, key: &str, v: &Option<T>) -> Result<(), CliError> {
    if let Some(v) = v {
        cfg.set(section, key, &v.to_string())?;
    }
    Ok(())
}

/// Confusion matrix over `idx`, split across `threads` workers with frozen weights.
pub fn evaluate_sharded(model: &Model, data: &Dataset, idx: &[usize], batch: usize, threads: usize) -> Result<ConfusionMatrix, CliError> {
    let threads = threads.clamp(1, idx.len().max(1));
    if threads == 1 {
        return Ok(evaluate(model, data, idx, batch)?);
    }
    let per = idx.len().div_ceil(threads);
    let parts: Vec<karma_core::Result<ConfusionMatrix>> = std::thread::scope(|s| {
        let handles: Vec<_> = idx.chunks(per).map(|chunk| s.spawn(move || evaluate(model, data, chunk, batch))).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut cm = ConfusionMatrix::new(data.classes);
    for p in parts {
        cm.merge(&p?)?;
    }
    Ok(cm)
}

pub fn metrics_line(m: &SegMetrics) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{:.6}", x)).collect::<Vec<_>>().join(",");
    format!(
        "event=metrics miou={:.6} miou_bg={:.6} f1={:.6} f1_bg={:.6} balanced_acc={:.6} mcc={:.6} fw_iou={:.6} pixel_acc={:.6} iou={} f1_per_class={} mcc_per_class={}",
        m.miou_wo_bg,
        m.miou_with_bg,
        m.f1_wo_bg,
        m.f1_with_bg,
        m.balanced_acc,
        m.mean_mcc,
        m.fw_iou,
        m.pixel_acc,
        join(&m.per_class_iou),
        join(&m.per_class_f1),
        join(&m.per_class_mcc)
    )
}

/// Runs one parsed command, writing event lines to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common, out: dir, count, height, width, classes, seed, cell } => {
            let mut cfg = load_config(&common)?;
            flag(&mut cfg, "synth", "count", &count)?;
            flag(&mut cfg, "synth", "height", &height)?;
            flag(&mut cfg, "synth", "width", &width)?;
            flag(&mut cfg, "synth", "classes", &classes)?;
            flag(&mut cfg, "synth", "seed", &seed)?;
            flag(&mut cfg, "synth", "cell", &cell)?;
            finish_config(&mut cfg)?;
            let (spec, n) = cfg.synth()?;
            let data = Dataset::synthetic(&spec, n)?;
            write_dataset(&dir, &data, Some(&spec))?;
            writeln!(
                out,
                "event=synth dir={} count={} height={} width={} classes={} seed={}",
                dir.display(),
                n,
                spec.height,
                spec.width,
                spec.classes,
                spec.seed
            )?;
        }
        Command::Train { common, data, out: dir, variant, epochs, batch_size, lr, seed, threads } => {
            let mut cfg = load_config(&common)?;
            flag(&mut cfg, "model", "variant", &variant)?;
            flag(&mut cfg, "train", "epochs", &epochs)?;
            flag(&mut cfg, "train", "batch_size", &batch_size)?;
            flag(&mut cfg, "train", "lr", &lr)?;
            flag(&mut cfg, "train", "seed", &seed)?;
            flag(&mut cfg, "model", "seed", &seed)?;
            flag(&mut cfg, "train", "threads", &threads)?;
            finish_config(&mut cfg)?;
            // Dataset and config problems surface before any training.
            let dataset = read_dataset(&data)?;
            let mcfg = cfg.model(dataset.classes)?;
            if mcfg.num_classes != dataset.classes {
                return Err(CliError::Failed(format!(
                    "model.classes = {} but the dataset has {} classes",
                    mcfg.num_classes, dataset.classes
                )));
            }
            let tcfg = cfg.train()?;
            fs::create_dir_all(&dir)?;
            let mut log = fs::File::create(dir.join("train.log"))?;
            let mut model = Model::new(mcfg)?;
            writeln!(
                out,
                "event=start variant={} params={} samples={} epochs={} batch_size={} seed={}",
                model.config.variant.as_str(),
                model.num_params(),
                dataset.len(),
                tcfg.epochs,
                tcfg.batch_size,
                tcfg.seed
            )?;
            let mut io_err: Option<std::io::Error> = None;
            let report = fit(&mut model, &dataset, &tcfg, |l| {
                let line = l.to_string();
                if let Err(e) = writeln!(out, "{}", line).and_then(|_| writeln!(log, "{}", line)) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            save_checkpoint(&dir.join("final"), &model)?;
            model.store = report.best;
            save_checkpoint(&dir.join("best"), &model)?;
            writeln!(
                out,
                "event=done best_epoch={} best_val_miou={} checkpoint={}",
                report.best_epoch,
                report.best_miou,
                dir.join("best").display()
            )?;
        }
        Command::Eval { common, checkpoint, data, threads, split, zero_support, batch_size } => {
            let mut cfg = load_config(&common)?;
            flag(&mut cfg, "train", "threads", &threads)?;
            let model = load_checkpoint(&checkpoint)?;
            let dataset = read_dataset(&data)?;
            let (train, val) = dataset.split();
            let idx: Vec<usize> = match split.as_str() {
                "all" => (0..dataset.len()).collect(),
                "train" => train,
                "val" => val,
                s => return Err(CliError::Usage(format!("--split `{}`; valid: all train val", s))),
            };
            let zero = match zero_support.as_str() {
                "zero" => ZeroSupport::IncludeAsZero,
                "exclude" => ZeroSupport::Exclude,
                s => return Err(CliError::Usage(format!("--zero-support `{}`; valid: zero exclude", s))),
            };
            let cm = evaluate_sharded(&model, &dataset, &idx, batch_size, cfg.threads()?)?;
            let m = compute_metrics(&cm, Some(0), zero)?;
            writeln!(out, "{} samples={}", metrics_line(&m), idx.len())?;
        }
        Command::Audit { common, variant, res, height, width, classes, out: file } => {
            let mut cfg = load_config(&common)?;
            flag(&mut cfg, "model", "variant", &variant)?;
            flag(&mut cfg, "model", "classes", &classes)?;
            finish_config(&mut cfg)?;
            let mcfg = cfg.model(2)?;
            let (h, w) = (height.unwrap_or(res), width.unwrap_or(res));
            let rep = audit::report(&mcfg, h, w)?;
            let text = audit::render(&mcfg, &rep);
            out.write_all(text.as_bytes())?;
            if let Some(f) = file {
                write_file(&f, &text)?;
            }
        }
        Command::Gradcheck { module } => {
            let results = gradcheck::run(&module).map_err(|e| match e {
                karma_core::Error::Config(m) => CliError::Usage(m),
                other => other.into(),
            })?;
            let mut failed = 0;
            for r in &results {
                writeln!(out, "{}", r)?;
                failed += usize::from(!r.passed());
            }
            writeln!(out, "event=gradcheck_summary checks={} failed={}", results.len(), failed)?;
            if failed > 0 {
                return Err(CliError::Failed(format!("{} gradient checks above tolerance", failed)));
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)?;
    Ok(())
}
