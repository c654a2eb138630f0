//! TOML run configuration and `--set` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use dacsm_core::csm::ScaleSet;
use dacsm_core::dat::{InitSpec, ModelConfig, NoiseLayers};
use dacsm_core::losses::{KlDirection, LossWeights};
use dacsm_core::pipeline::{Ablation, DomainStyle, Experiment, SgdConfig, SyntheticDomainSpec, TrainConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA: &str = "dacsm-config/1";

#[derive(Debug)]
pub enum ConfigError {
    Io {
        path: PathBuf,
        message: String,
    },
    Parse(String),
    /// `--set` argument without `=` or with an empty key.
    Override(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io { path, message } => write!(f, "{}: {message}", path.display()),
            Self::Parse(m) => write!(f, "bad config: {m}"),
            Self::Override(m) => write!(f, "bad override {m:?}: expected KEY=VALUE"),
            Self::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "base-dat")]
    BaseDat,
    #[serde(rename = "dat+noise")]
    DatNoise,
    #[serde(rename = "dat+csm")]
    DatCsm,
    #[serde(rename = "full")]
    Full,
}

impl From<Variant> for Ablation {
    fn from(v: Variant) -> Self {
        match v {
            Variant::BaseDat => Ablation::BaseDat,
            Variant::DatNoise => Ablation::DatNoise,
            Variant::DatCsm => Ablation::DatCsm,
            Variant::Full => Ablation::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema: String,
    /// Directory receiving metrics, summary and checkpoint.
    pub out: PathBuf,
    pub variant: Variant,
    pub model: ModelSection,
    pub init: InitSection,
    pub train: TrainSection,
    pub noise: NoiseSection,
    pub loss: LossSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub patch: usize,
    pub channels: usize,
    /// Image sides of the cross-scale set, one sub-center each.
    pub scales: Vec<usize>,
    pub native_side: usize,
    pub ln_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub embedding_std: f64,
    pub classifier_std: f64,
    pub subcenter_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub refresh_interval: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub crop_min: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    /// Only `"all"` is accepted.
    Named(String),
    Only(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub sigma: f64,
    pub layers: LayerSelection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlOrder {
    TeacherStudent,
    StudentTeacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub w_cls_s: f64,
    pub w_cls_s2t: f64,
    pub w_dst: f64,
    pub w_cls_t: f64,
    pub w_style: f64,
    pub tau_distill: f64,
    pub kl_direction: KlOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSection {
    pub background: [f64; 3],
    pub foreground: [f64; 3],
    pub color_jitter: f64,
    pub contrast: f64,
    pub texture: f64,
    pub size_range: [f64; 2],
    pub class_tint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub classes: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub side: usize,
    pub seed: u64,
    pub source: StyleSection,
    pub target: StyleSection,
}

impl From<&DomainStyle> for StyleSection {
    fn from(s: &DomainStyle) -> Self {
        Self {
            background: s.background,
            foreground: s.foreground,
            color_jitter: s.color_jitter,
            contrast: s.contrast,
            texture: s.texture,
            size_range: [s.size_range.0, s.size_range.1],
            class_tint: s.class_tint,
        }
    }
}

impl From<&StyleSection> for DomainStyle {
    fn from(s: &StyleSection) -> Self {
        Self {
            background: s.background,
            foreground: s.foreground,
            color_jitter: s.color_jitter,
            contrast: s.contrast,
            texture: s.texture,
            size_range: (s.size_range[0], s.size_range[1]),
            class_tint: s.class_tint,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_experiment(&Experiment::default())
    }
}

macro_rules! section_default {
    ($ty:ident, $field:ident) => {
        impl Default for $ty {
            fn default() -> Self {
                RunConfig::default().$field
            }
        }
    };
}

section_default!(ModelSection, model);
section_default!(InitSection, init);
section_default!(TrainSection, train);
section_default!(NoiseSection, noise);
section_default!(LossSection, loss);
section_default!(DataSection, data);

impl RunConfig {
    fn from_experiment(e: &Experiment) -> Self {
        let m = &e.model;
        let t = &e.train;
        let w = &t.weights;
        Self {
            schema: CONFIG_SCHEMA.into(),
            out: PathBuf::from("runs/default"),
            variant: Variant::Full,
            model: ModelSection {
                dim: m.dim,
                layers: m.layers,
                heads: m.heads,
                mlp_hidden: m.mlp_hidden,
                patch: m.patch,
                channels: m.channels,
                scales: m.scales.sides().to_vec(),
                native_side: m.native_side,
                ln_eps: m.ln_eps,
            },
            init: InitSection {
                embedding_std: e.init.embedding_std,
                classifier_std: e.init.classifier_std,
                subcenter_jitter: e.init.subcenter_jitter,
            },
            train: TrainSection {
                epochs: t.epochs,
                warmup_epochs: t.warmup_epochs,
                refresh_interval: t.refresh_interval,
                batch_size: t.batch_size,
                lr: t.sgd.lr,
                momentum: t.sgd.momentum,
                weight_decay: t.sgd.weight_decay,
                crop_min: t.crop_min,
                seed: t.seed,
            },
            noise: NoiseSection {
                sigma: t.noise_sigma,
                layers: match &t.noise_layers {
                    NoiseLayers::All => LayerSelection::Named("all".into()),
                    NoiseLayers::Only(v) => LayerSelection::Only(v.clone()),
                },
            },
            loss: LossSection {
                w_cls_s: w.w_cls_s,
                w_cls_s2t: w.w_cls_s2t,
                w_dst: w.w_dst,
                w_cls_t: w.w_cls_t,
                w_style: w.w_style,
                tau_distill: w.tau_distill,
                kl_direction: match w.kl_direction {
                    KlDirection::TeacherStudent => KlOrder::TeacherStudent,
                    KlDirection::StudentTeacher => KlOrder::StudentTeacher,
                },
            },
            data: DataSection {
                classes: e.data.classes,
                source_per_class: e.data.source_per_class,
                target_per_class: e.data.target_per_class,
                side: e.data.side,
                seed: e.data.seed,
                source: (&e.data.source).into(),
                target: (&e.data.target).into(),
            },
        }
    }

    /// Defaults, overlaid with the file at `path`, then with `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults parse");
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        merge(&mut table, file);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.schema != CONFIG_SCHEMA {
            return Err(ConfigError::Invalid(format!(
                "schema {:?} is not {CONFIG_SCHEMA:?}",
                cfg.schema
            )));
        }
        Ok(cfg)
    }

    /// Architecture, training and data settings, with the variant applied.
    pub fn experiment(&self) -> Result<Experiment, ConfigError> {
        let invalid = |e: dacsm_core::Error| ConfigError::Invalid(e.to_string());
        let m = &self.model;
        let l = &self.loss;
        let noise_layers = match &self.noise.layers {
            LayerSelection::Named(s) if s == "all" => NoiseLayers::All,
            LayerSelection::Named(s) => {
                return Err(ConfigError::Invalid(format!(
                    "noise.layers: expected \"all\" or a list, got {s:?}"
                )))
            }
            LayerSelection::Only(v) => NoiseLayers::Only(v.clone()),
        };
        let e = Experiment {
            model: ModelConfig {
                dim: m.dim,
                layers: m.layers,
                heads: m.heads,
                mlp_hidden: m.mlp_hidden,
                patch: m.patch,
                channels: m.channels,
                classes: self.data.classes,
                scales: ScaleSet::new(m.scales.clone(), m.patch).map_err(invalid)?,
                native_side: m.native_side,
                ln_eps: m.ln_eps,
            },
            init: InitSpec {
                embedding_std: self.init.embedding_std,
                classifier_std: self.init.classifier_std,
                subcenter_jitter: self.init.subcenter_jitter,
            },
            train: TrainConfig {
                epochs: self.train.epochs,
                warmup_epochs: self.train.warmup_epochs,
                refresh_interval: self.train.refresh_interval,
                batch_size: self.train.batch_size,
                sgd: SgdConfig {
                    lr: self.train.lr,
                    momentum: self.train.momentum,
                    weight_decay: self.train.weight_decay,
                },
                noise_sigma: self.noise.sigma,
                noise_layers,
                weights: LossWeights {
                    w_cls_s: l.w_cls_s,
                    w_cls_s2t: l.w_cls_s2t,
                    w_dst: l.w_dst,
                    w_cls_t: l.w_cls_t,
                    w_style: l.w_style,
                    tau_distill: l.tau_distill,
                    kl_direction: match l.kl_direction {
                        KlOrder::TeacherStudent => KlDirection::TeacherStudent,
                        KlOrder::StudentTeacher => KlDirection::StudentTeacher,
                    },
                },
                crop_min: self.train.crop_min,
                seed: self.train.seed,
            },
            data: SyntheticDomainSpec {
                classes: self.data.classes,
                source_per_class: self.data.source_per_class,
                target_per_class: self.data.target_per_class,
                side: self.data.side,
                source: (&self.data.source).into(),
                target: (&self.data.target).into(),
                seed: self.data.seed,
            },
        };
        let e = e.ablation(self.variant.into()).map_err(invalid)?;
        e.validate().map_err(invalid)?;
        Ok(e)
    }

    /// Seeds data generation and training alike.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Recursively replaces entries of `base` with those of `top`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Parse(format!("{key}: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_the_reference_experiment() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.experiment().unwrap(), Experiment::default());
    }

    #[test]
    fn serialised_defaults_round_trip() {
        let text = RunConfig::default().to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn shipped_default_file_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::load(None, &["train.epochz=3".into()]).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        let err = RunConfig::load(None, &["bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn overrides_reach_every_section() {
        let sets: Vec<String> = [
            "train.epochs=3",
            "train.warmup_epochs=1",
            "noise.sigma=0.2",
            "noise.layers=[1]",
            "model.scales=[16, 24]",
            "loss.kl_direction=student-teacher",
            "data.source.size_range=[0.5, 0.9]",
            "data.target.background=[0.0, 0.0, 0.0]",
            "variant=dat+csm",
            "init.classifier_std=0.2",
            "out=/tmp/x",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let cfg = RunConfig::load(None, &sets).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.noise.layers, LayerSelection::Only(vec![1]));
        assert_eq!(cfg.loss.kl_direction, KlOrder::StudentTeacher);
        assert_eq!(cfg.data.target.background, [0.0; 3]);
        assert_eq!(cfg.out, PathBuf::from("/tmp/x"));
        let e = cfg.experiment().unwrap();
        assert_eq!(e.model.scales.sides(), &[16, 24]);
        assert_eq!(e.train.noise_sigma, 0.0);
        assert_eq!(e.data.source.size_range, (0.5, 0.9));
        assert_eq!(e.init.classifier_std, 0.2);
    }

    #[test]
    fn malformed_overrides_rejected() {
        for bad in ["epochs", "=3", "train..epochs=3"] {
            assert!(matches!(
                RunConfig::load(None, &[bad.into()]),
                Err(ConfigError::Override(_))
            ));
        }
        assert!(matches!(
            RunConfig::load(None, &["train=3".into(), "train.epochs=1".into()]),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn semantic_errors_detected() {
        let cfg = RunConfig::load(None, &["train.warmup_epochs=50".into()]).unwrap();
        assert!(matches!(cfg.experiment(), Err(ConfigError::Invalid(_))));
        let cfg = RunConfig::load(None, &["noise.layers=some".into()]).unwrap();
        assert!(matches!(cfg.experiment(), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            RunConfig::load(None, &["schema=dacsm-config/0".into()]),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn partial_file_keeps_per_domain_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[data.target]\ntexture = 0.2\n[train]\nepochs = 3\nwarmup_epochs = 1\n",
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.data.target.texture, 0.2);
        assert_eq!(cfg.data.target.size_range, d.data.target.size_range);
        assert_eq!(cfg.data.source, d.data.source);
        assert_eq!(cfg.train.epochs, 3);
        std::fs::write(&path, "[train]\nepochz = 3\n").unwrap();
        assert!(RunConfig::load(Some(&path), &[])
            .unwrap_err()
            .to_string()
            .contains("epochz"));
        std::fs::write(&path, "[train\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&path), &[]), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::load(Some(Path::new("/nonexistent/run.toml")), &[]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run.toml"));
    }
}
