//! End-to-end adaptation runs on synthetic two-domain data.

mod data;
mod eval;
mod optim;
mod train;

pub use data::{generate_domains, DomainData, DomainStyle, SourceSet, SyntheticDomainSpec, TargetSet, SHAPES};
pub use eval::{
    a_distance_proxy, embed_all, evaluate, predict, score_predictions, specialization, Embedded, EvalReport,
};
pub use optim::{Sgd, SgdConfig};
pub use train::{
    assign_pseudo_labels, augment, objective, pair_features, snapshot, train, training_pairs, DomainPair, EpochMetrics,
    PairInput, Snapshot, TrainConfig, TrainOutcome,
};

use alloc::vec;

use crate::csm::ScaleSet;
use crate::dat::{InitSpec, Model, ModelConfig};
use crate::error::Result;

/// Which components of the method are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Four-stream transformer, no noise, native scale only.
    BaseDat,
    DatNoise,
    DatCsm,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::BaseDat, Ablation::DatNoise, Ablation::DatCsm, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::BaseDat => "base-dat",
            Self::DatNoise => "dat+noise",
            Self::DatCsm => "dat+csm",
            Self::Full => "full",
        }
    }

    fn noise(self) -> bool {
        matches!(self, Self::DatNoise | Self::Full)
    }

    fn csm(self) -> bool {
        matches!(self, Self::DatCsm | Self::Full)
    }
}

/// Architecture, initialisation, optimisation and data of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub model: ModelConfig,
    pub init: InitSpec,
    pub train: TrainConfig,
    pub data: SyntheticDomainSpec,
}

pub const DEFAULT_SIDES: [usize; 3] = [16, 24, 32];

impl Default for Experiment {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                dim: 32,
                layers: 2,
                heads: 4,
                mlp_hidden: 64,
                patch: 8,
                channels: 3,
                classes: 4,
                scales: ScaleSet::new(DEFAULT_SIDES.to_vec(), 8).expect("default sides tile"),
                native_side: 24,
                ln_eps: 1e-6,
            },
            init: InitSpec::default(),
            train: TrainConfig::default(),
            data: SyntheticDomainSpec::default(),
        }
    }
}

impl Experiment {
    /// Uses `seed` for data, initialisation and training randomness.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Drops noise and/or the extra scales according to `ablation`.
    pub fn ablation(mut self, ablation: Ablation) -> Result<Self> {
        if !ablation.noise() {
            self.train.noise_sigma = 0.0;
        }
        if !ablation.csm() {
            self.model.scales = ScaleSet::new(vec![self.model.native_side], self.model.patch)?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.classes != self.model.classes {
            return Err(crate::Error::Spec(alloc::format!(
                "data has {} classes, the model {}",
                self.data.classes,
                self.model.classes
            )));
        }
        if self.data.side != self.model.native_side {
            return Err(crate::Error::Spec(alloc::format!(
                "images are rendered at {} but the native side is {}",
                self.data.side,
                self.model.native_side
            )));
        }
        Ok(())
    }

    pub fn initial_model(&self) -> Result<Model> {
        Model::init(self.model.clone(), self.init, self.train.seed)
    }

    pub fn run(&self) -> Result<(DomainData, TrainOutcome)> {
        self.validate()?;
        let data = generate_domains(&self.data)?;
        let outcome = train(&self.train, self.initial_model()?, &data)?;
        Ok((data, outcome))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use alloc::vec::Vec;

    fn small() -> Experiment {
        let mut e = Experiment::default();
        e.model.dim = 16;
        e.model.mlp_hidden = 32;
        e.data.source_per_class = 6;
        e.data.target_per_class = 6;
        e.train.epochs = 4;
        e.train.warmup_epochs = 2;
        e.train.refresh_interval = 2;
        e.train.batch_size = 8;
        e
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let mut e = small();
        e.train.epochs = 0;
        let (_, out) = e.run().unwrap();
        assert!(out.history.is_empty());
        assert!(out.model.params.bit_eq(&e.initial_model().unwrap().params));
    }

    #[test]
    fn zero_learning_rate_is_null() {
        let mut e = small();
        e.train.sgd.lr = 0.0;
        let (_, out) = e.run().unwrap();
        assert_eq!(out.history.len(), 4);
        assert!(out.model.params.bit_eq(&e.initial_model().unwrap().params));
    }

    #[test]
    fn warmup_and_refresh_schedule() {
        let mut e = small();
        e.train.epochs = 5;
        let (_, out) = e.run().unwrap();
        let cls_t: Vec<f64> = out.history.iter().map(|h| h.loss.cls_t).collect();
        assert_eq!(&cls_t[..2], &[0.0, 0.0]);
        assert!(cls_t[2..].iter().all(|&v| v > 0.0));
        let refreshed: Vec<bool> = out.history.iter().map(|h| h.refreshed).collect();
        assert_eq!(refreshed, [true, false, true, false, true]);
        assert!(out.history.iter().enumerate().all(|(i, h)| h.epoch == i));
    }

    #[test]
    fn runs_are_deterministic() {
        let e = small();
        let (_, a) = e.run().unwrap();
        let (_, b) = e.run().unwrap();
        assert_eq!(a.history, b.history);
        assert!(a.model.params.bit_eq(&b.model.params));
        let (_, c) = e.clone().with_seed(99).run().unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn divergence_names_the_term() {
        let mut e = small();
        e.train.sgd.lr = 1e12;
        e.train.sgd.momentum = 0.0;
        match e.run() {
            Err(Error::NonFinite { term, step }) => {
                assert!(crate::losses::LossReport::TERMS.contains(&term));
                assert!(step > 0);
            }
            other => panic!(
                "expected a non-finite abort, got {:?}",
                other.map(|(_, o)| o.history.len())
            ),
        }
    }

    #[test]
    fn mismatched_experiment_rejected() {
        let mut e = small();
        e.data.classes = 3;
        assert!(matches!(e.run(), Err(Error::Spec(_))));
        let mut e = small();
        e.train.warmup_epochs = 4;
        assert!(e.run().is_err());
    }

    #[test]
    fn ablations_switch_components() {
        let e = Experiment::default();
        let base = e.clone().ablation(Ablation::BaseDat).unwrap();
        assert_eq!(base.model.scales.sides(), &[24]);
        assert_eq!(base.train.noise_sigma, 0.0);
        let full = e.clone().ablation(Ablation::Full).unwrap();
        assert_eq!(full, e);
        let csm = e.clone().ablation(Ablation::DatCsm).unwrap();
        assert_eq!((csm.model.scales.len(), csm.train.noise_sigma), (3, 0.0));
        let noise = e.ablation(Ablation::DatNoise).unwrap();
        assert_eq!(noise.model.scales.len(), 1);
        assert!(noise.train.noise_sigma > 0.0);
    }
}
