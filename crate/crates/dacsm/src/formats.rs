//! Metrics CSV, run summary and checkpoint files.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use dacsm_core::csm::ScaleSet;
use dacsm_core::dat::{InitSpec, Model, ModelConfig};
use dacsm_core::pipeline::{EpochMetrics, EvalReport, Snapshot};
use dacsm_core::Tensor;
use serde::{Deserialize, Serialize};

pub const METRICS_SCHEMA: &str = "dacsm-metrics/1";
pub const SUMMARY_SCHEMA: &str = "dacsm-summary/1";
pub const EVAL_SCHEMA: &str = "dacsm-eval/1";
pub const CHECKPOINT_SCHEMA: &str = "dacsm-checkpoint/1";

#[derive(Debug)]
pub enum FormatError {
    Io { path: PathBuf, message: String },
    Corrupt { path: PathBuf, message: String },
    Schema { path: PathBuf, found: String },
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io { path, message } => write!(f, "{}: {message}", path.display()),
            Self::Corrupt { path, message } => write!(f, "{}: corrupted: {message}", path.display()),
            Self::Schema { path, found } => write!(
                f,
                "{}: schema {found:?}, expected {CHECKPOINT_SCHEMA:?}",
                path.display()
            ),
        }
    }
}

impl std::error::Error for FormatError {}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FormatError + '_ {
    move |e| FormatError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn metrics_header(classes: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "cls_s",
        "cls_s2t",
        "dst",
        "cls_t",
        "style",
        "total",
        "target_avg",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..classes).map(|c| format!("acc_{c}")));
    h.extend(
        ["a_distance", "attention_entropy", "pseudo_accuracy", "refreshed"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

pub fn metrics_row(m: &EpochMetrics) -> Vec<String> {
    let l = &m.loss;
    let mut row = vec![m.epoch.to_string()];
    row.extend(
        [l.cls_s, l.cls_s2t, l.dst, l.cls_t, l.style, l.total, m.eval.avg]
            .iter()
            .map(f64::to_string),
    );
    row.extend(m.eval.per_class.iter().map(f64::to_string));
    row.extend(
        [m.a_distance, m.attention_entropy, m.pseudo_accuracy]
            .iter()
            .map(f64::to_string),
    );
    row.push(u8::from(m.refreshed).to_string());
    row
}

/// Append-only per-epoch metrics; every row is flushed as it is written.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, classes: usize) -> Result<Self, FormatError> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let mut inner = csv::Writer::from_writer(file);
        let mut w = Self {
            path: path.to_path_buf(),
            inner: {
                inner
                    .write_record(metrics_header(classes))
                    .map_err(|e| FormatError::Io {
                        path: path.to_path_buf(),
                        message: e.to_string(),
                    })?;
                inner
            },
        };
        w.flush()?;
        Ok(w)
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<(), FormatError> {
        self.inner.write_record(metrics_row(m)).map_err(|e| FormatError::Io {
            path: self.path.clone(),
            message: e.to_string(),
        })?;
        self.flush()
    }

    fn flush(&mut self) -> Result<(), FormatError> {
        self.inner.flush().map_err(io_err(&self.path))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub avg: f64,
    /// `null` for classes absent from the target set.
    pub per_class: Vec<Option<f64>>,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            avg: r.avg,
            per_class: r.per_class.iter().map(|v| (!v.is_nan()).then_some(*v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub eval: EvalSummary,
    pub a_distance: f64,
    pub attention_entropy: f64,
}

impl From<&Snapshot> for StateSummary {
    fn from(s: &Snapshot) -> Self {
        Self {
            eval: (&s.eval).into(),
            a_distance: s.a_distance,
            attention_entropy: s.attention_entropy,
        }
    }
}

impl From<&EpochMetrics> for StateSummary {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            eval: (&m.eval).into(),
            a_distance: m.a_distance,
            attention_entropy: m.attention_entropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub metrics_schema: String,
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    /// Overrides as given on the command line, in order; `--seed` appears as `seed`.
    pub overrides: Vec<Override>,
    pub initial: StateSummary,
    /// After the last epoch; equals `initial` when no epoch ran.
    #[serde(rename = "final")]
    pub last: StateSummary,
    /// Resolved configuration as TOML text.
    pub config: String,
    pub files: SummaryFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFiles {
    pub metrics: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub schema: String,
    pub checkpoint: String,
    pub eval: EvalSummary,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(&mut file, value).map_err(|e| FormatError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    file.write_all(b"\n").map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointModel {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub patch: usize,
    pub channels: usize,
    pub classes: usize,
    pub scales: Vec<usize>,
    pub native_side: usize,
    pub ln_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema: String,
    pub epochs: usize,
    pub model: CheckpointModel,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, epochs: usize) -> Self {
        let c = &model.config;
        let mut tensors = Vec::new();
        model.params.visit(&mut |path, t| {
            tensors.push(TensorEntry {
                path,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
        });
        Self {
            schema: CHECKPOINT_SCHEMA.into(),
            epochs,
            model: CheckpointModel {
                dim: c.dim,
                layers: c.layers,
                heads: c.heads,
                mlp_hidden: c.mlp_hidden,
                patch: c.patch,
                channels: c.channels,
                classes: c.classes,
                scales: c.scales.sides().to_vec(),
                native_side: c.native_side,
                ln_eps: c.ln_eps,
            },
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| FormatError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("");
        if schema != CHECKPOINT_SCHEMA {
            return Err(FormatError::Schema {
                path: path.to_path_buf(),
                found: schema.into(),
            });
        }
        serde_json::from_value(value).map_err(|e| FormatError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Rebuilds the model; every parameter must be present with its expected shape.
    pub fn to_model(&self, path: &Path) -> Result<Model, FormatError> {
        let corrupt = |message: String| FormatError::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        let m = &self.model;
        let config = ModelConfig {
            dim: m.dim,
            layers: m.layers,
            heads: m.heads,
            mlp_hidden: m.mlp_hidden,
            patch: m.patch,
            channels: m.channels,
            classes: m.classes,
            scales: ScaleSet::new(m.scales.clone(), m.patch).map_err(|e| corrupt(e.to_string()))?,
            native_side: m.native_side,
            ln_eps: m.ln_eps,
        };
        let mut model = Model::init(config.clone(), InitSpec::default(), 0).map_err(|e| corrupt(e.to_string()))?;
        let expected = model.params.paths();
        if expected.len() != self.tensors.len() {
            return Err(corrupt(format!(
                "{} tensors, the model has {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        let mut problem = None;
        let mut entries = self.tensors.iter();
        model.params.visit_mut(&mut |p, t| {
            let e = entries.next().expect("counted");
            if problem.is_some() {
                return;
            }
            if e.path != p || e.shape.as_slice() != t.shape() {
                problem = Some(format!("expected {p} {:?}, found {} {:?}", t.shape(), e.path, e.shape));
                return;
            }
            match Tensor::new(&e.shape, e.data.clone()) {
                Ok(v) => *t = v,
                Err(err) => problem = Some(format!("{p}: {err}")),
            }
        });
        if let Some(msg) = problem {
            return Err(corrupt(msg));
        }
        Model::from_params(config, model.params).map_err(|e| corrupt(e.to_string()))
    }
}
