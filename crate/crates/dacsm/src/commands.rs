//! `train`, `eval` and `verify` as functions returning process exit codes.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use dacsm_core::pipeline::{evaluate, generate_domains, train};
use dacsm_core::verify::Suite;

use crate::config::{ConfigError, RunConfig};
use crate::formats::{
    Checkpoint, EvalOutput, FormatError, MetricsWriter, Override, RunSummary, StateSummary, SummaryFiles, EVAL_SCHEMA,
    METRICS_SCHEMA, SUMMARY_SCHEMA,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Debug)]
pub enum CommandError {
    Config(ConfigError),
    Format(FormatError),
    /// A loss term diverged.
    Numeric(dacsm_core::Error),
    Run(dacsm_core::Error),
    UnknownSuite(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }
}

impl fmt::Display for CommandError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(e) => e.fmt(f),
            Self::Format(e) => e.fmt(f),
            Self::Numeric(e) => write!(f, "training aborted: {e}"),
            Self::Run(e) => e.fmt(f),
            Self::UnknownSuite(s) => write!(
                f,
                "unknown suite {s:?}; expected all, {}",
                Suite::ALL.map(|s| s.name()).join(", ")
            ),
        }
    }
}

impl std::error::Error for CommandError {}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e)
    }
}

impl From<FormatError> for CommandError {
    fn from(e: FormatError) -> Self {
        Self::Format(e)
    }
}

fn core_err(e: dacsm_core::Error) -> CommandError {
    match e {
        dacsm_core::Error::NonFinite { .. } => CommandError::Numeric(e),
        e => CommandError::Run(e),
    }
}

/// Flags shared by `train` and `eval`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig, CommandError> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }

    fn echoed(&self) -> Vec<Override> {
        let mut v: Vec<Override> = self
            .overrides
            .iter()
            .map(|o| {
                let (k, val) = o.split_once('=').unwrap_or((o, ""));
                Override {
                    key: k.trim().into(),
                    value: val.trim().into(),
                }
            })
            .collect();
        if let Some(s) = self.seed {
            v.push(Override {
                key: "seed".into(),
                value: s.to_string(),
            });
        }
        if let Some(o) = &self.out {
            v.push(Override {
                key: "out".into(),
                value: o.display().to_string(),
            });
        }
        v
    }
}

fn create_dir(dir: &Path) -> Result<(), CommandError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CommandError::Format(FormatError::Io {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })
    })
}

/// Trains, then writes metrics, summary and checkpoint into the output directory.
pub fn train_run(args: &RunArgs, log: &mut dyn Write) -> Result<RunSummary, CommandError> {
    let cfg = args.resolve()?;
    let experiment = cfg.experiment()?;
    create_dir(&cfg.out)?;
    let metrics_path = cfg.out.join(METRICS_FILE);
    let mut metrics = MetricsWriter::create(&metrics_path, experiment.model.classes)?;
    let data = generate_domains(&experiment.data).map_err(core_err)?;
    let model = experiment.initial_model().map_err(core_err)?;
    let outcome = train(&experiment.train, model, &data).map_err(core_err)?;
    for m in &outcome.history {
        metrics.append(m)?;
        let _ = writeln!(
            log,
            "epoch {:>3}  total {:.4}  target avg {:.3}  a-distance {:.3}",
            m.epoch, m.loss.total, m.eval.avg, m.a_distance
        );
    }
    let checkpoint_path = cfg.out.join(CHECKPOINT_FILE);
    Checkpoint::from_model(&outcome.model, outcome.history.len()).save(&checkpoint_path)?;
    let initial = StateSummary::from(&outcome.initial);
    let summary = RunSummary {
        schema: SUMMARY_SCHEMA.into(),
        metrics_schema: METRICS_SCHEMA.into(),
        variant: dacsm_core::pipeline::Ablation::from(cfg.variant).name().into(),
        seed: cfg.train.seed,
        epochs: outcome.history.len(),
        overrides: args.echoed(),
        last: outcome
            .history
            .last()
            .map(StateSummary::from)
            .unwrap_or_else(|| initial.clone()),
        initial,
        config: cfg.to_toml(),
        files: SummaryFiles {
            metrics: METRICS_FILE.into(),
            checkpoint: CHECKPOINT_FILE.into(),
        },
    };
    crate::formats::write_json(&cfg.out.join(SUMMARY_FILE), &summary)?;
    let _ = writeln!(
        log,
        "{} epochs, target avg {:.3} -> {:.3}; wrote {}",
        summary.epochs,
        summary.initial.eval.avg,
        summary.last.eval.avg,
        cfg.out.display()
    );
    Ok(summary)
}

/// Evaluates a checkpoint on the target domain described by the configuration.
pub fn eval_run(checkpoint: &Path, args: &RunArgs, log: &mut dyn Write) -> Result<EvalOutput, CommandError> {
    let cfg = args.resolve()?;
    let experiment = cfg.experiment()?;
    let model = Checkpoint::load(checkpoint)?.to_model(checkpoint)?;
    if model.config.classes != experiment.data.classes || model.config.native_side != experiment.data.side {
        return Err(CommandError::Format(FormatError::Corrupt {
            path: checkpoint.to_path_buf(),
            message: format!(
                "checkpoint has {} classes at side {}, the config {} at side {}",
                model.config.classes, model.config.native_side, experiment.data.classes, experiment.data.side
            ),
        }));
    }
    let data = generate_domains(&experiment.data).map_err(core_err)?;
    let report = evaluate(&model, &data.target).map_err(core_err)?;
    for (c, acc) in report.per_class.iter().enumerate() {
        let _ = writeln!(log, "class {c}: {acc:.4}");
    }
    let _ = writeln!(log, "avg: {:.4}", report.avg);
    let out = EvalOutput {
        schema: EVAL_SCHEMA.into(),
        checkpoint: checkpoint.display().to_string(),
        eval: (&report).into(),
    };
    create_dir(&cfg.out)?;
    crate::formats::write_json(&cfg.out.join(EVAL_FILE), &out)?;
    Ok(out)
}

/// Runs the named suite(s); `Ok(false)` when a check failed.
pub fn verify_run(name: &str, log: &mut dyn Write) -> Result<bool, CommandError> {
    let suites = Suite::parse(name).ok_or_else(|| CommandError::UnknownSuite(name.into()))?;
    let mut ok = true;
    for s in suites {
        let start = std::time::Instant::now();
        let report = s.run().map_err(CommandError::Run)?;
        for line in report.lines() {
            let _ = writeln!(log, "{line}");
        }
        let _ = writeln!(log, "[{}] {:.2} s", s.name(), start.elapsed().as_secs_f64());
        ok &= report.passed();
    }
    Ok(ok)
}

fn finish<T>(r: Result<T, CommandError>, log: &mut dyn Write) -> Result<T, i32> {
    r.map_err(|e| {
        let _ = writeln!(log, "error: {e}");
        e.exit_code()
    })
}

pub fn cmd_train(args: &RunArgs, log: &mut dyn Write) -> i32 {
    match finish(train_run(args, log), log) {
        Ok(_) => EXIT_OK,
        Err(code) => code,
    }
}

pub fn cmd_eval(checkpoint: &Path, args: &RunArgs, log: &mut dyn Write) -> i32 {
    match finish(eval_run(checkpoint, args, log), log) {
        Ok(_) => EXIT_OK,
        Err(code) => code,
    }
}

pub fn cmd_verify(name: &str, log: &mut dyn Write) -> i32 {
    match finish(verify_run(name, log), log) {
        Ok(true) => EXIT_OK,
        Ok(false) => 1,
        Err(code) => code,
    }
}
