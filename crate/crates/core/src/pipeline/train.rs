//! The adaptation loop: pairing by nearest feature, source augmentation at a
//! random scale, paired four-stream forwards and SGD on the full objective.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::NoiseSpec;
use crate::dat::{forward_quad_on, DacsmParams, Model, NoiseLayers, QuadOptions, QuadTrace};
use crate::error::{Error, Result};
use crate::losses::{total_loss_on, LossItem, LossReport, LossWeights};
use crate::numerics::{Graph, Tensor};
use crate::resample::resize_bilinear;

use super::data::{DomainData, SourceSet};
use super::eval::{a_distance_proxy, embed_all, evaluate_features, score_predictions, EvalReport};
use super::optim::{Sgd, SgdConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Leading epochs trained without the pseudo-label term.
    pub warmup_epochs: usize,
    /// Pairs are rebuilt at epochs 0, n, 2n, …
    pub refresh_interval: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Key/value noise of the cross streams; `sigma == 0` disables it.
    pub noise_sigma: f64,
    pub noise_layers: NoiseLayers,
    pub weights: LossWeights,
    /// Smallest random crop side as a fraction of the source side.
    pub crop_min: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            warmup_epochs: 10,
            refresh_interval: 5,
            batch_size: 16,
            sgd: SgdConfig {
                lr: 0.005,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            noise_sigma: 0.3,
            noise_layers: NoiseLayers::All,
            weights: LossWeights::default(),
            crop_min: 0.85,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Spec(alloc::format!(
                "warm-up ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs,
                self.epochs
            )));
        }
        if self.refresh_interval == 0 {
            return Err(Error::Spec("refresh interval must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Spec("batch size must be positive".into()));
        }
        if !(self.crop_min > 0.0 && self.crop_min <= 1.0) {
            return Err(Error::Parameter {
                name: "crop_min",
                value: self.crop_min,
            });
        }
        self.sgd.validate()?;
        self.weights.validate()?;
        self.noise().validate()
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec::new(self.noise_sigma, self.seed)
    }

    pub fn quad_options(&self) -> QuadOptions {
        let noise = self.noise();
        QuadOptions {
            noise: noise.is_active().then_some(noise),
            noise_layers: self.noise_layers.clone(),
            ..QuadOptions::default()
        }
    }
}

/// A target sample and the source sample nearest to it in feature space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainPair {
    pub source: usize,
    pub target: usize,
    /// Label of `source`.
    pub pseudo_label: usize,
    pub distance: f64,
}

/// Euclidean nearest source feature for every target feature; ties keep the lowest index.
pub fn pair_features(source: &[Tensor], labels: &[usize], target: &[Tensor]) -> Result<Vec<DomainPair>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("pairing sets"));
    }
    if labels.len() != source.len() {
        return Err(Error::Contract(alloc::format!(
            "{} source labels for {} features",
            labels.len(),
            source.len()
        )));
    }
    target
        .iter()
        .enumerate()
        .map(|(t, ft)| {
            let mut best = (0, f64::INFINITY);
            for (s, fs) in source.iter().enumerate() {
                if fs.numel() != ft.numel() {
                    return Err(Error::Contract("pairing features differ in width".into()));
                }
                let d2: f64 = fs.data().iter().zip(ft.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.1 {
                    best = (s, d2);
                }
            }
            Ok(DomainPair {
                source: best.0,
                target: t,
                pseudo_label: labels[best.0],
                distance: libm::sqrt(best.1),
            })
        })
        .collect()
}

/// Training pairs: every target with its nearest source sample, followed by
/// every source sample with its nearest target sample. Each pair's
/// pseudo-label is the label of its source sample.
pub fn training_pairs(source: &[Tensor], labels: &[usize], target: &[Tensor]) -> Result<Vec<DomainPair>> {
    let mut pairs = pair_features(source, labels, target)?;
    let idx: Vec<usize> = (0..target.len()).collect();
    for back in pair_features(target, &idx, source)? {
        pairs.push(DomainPair {
            source: back.target,
            target: back.source,
            pseudo_label: labels[back.target],
            distance: back.distance,
        });
    }
    Ok(pairs)
}

/// Embeds both sets with the self-attention stream and pairs them.
pub fn assign_pseudo_labels(model: &Model, source: &SourceSet, target: &[Tensor]) -> Result<Vec<DomainPair>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("pairing sets"));
    }
    let fs = embed_all(model, &source.images)?;
    let ft = embed_all(model, target)?;
    pair_features(&fs.features, &source.labels, &ft.features)
}

/// Random square crop covering at least `crop_min` of the side, resized to `side`.
pub fn augment(rng: &mut impl Rng, image: &Tensor, crop_min: f64, side: usize) -> Result<Tensor> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let full = h.min(w);
    let lo = libm::ceil(crop_min * full as f64) as usize;
    let u: f64 = rng.random();
    let crop = (lo + (u * (full - lo + 1) as f64) as usize).min(full).max(1);
    let oy = ((rng.random::<f64>() * (h - crop + 1) as f64) as usize).min(h - crop);
    let ox = ((rng.random::<f64>() * (w - crop + 1) as f64) as usize).min(w - crop);
    let mut window = Vec::with_capacity(crop * crop * c);
    for y in oy..oy + crop {
        let start = (y * w + ox) * c;
        window.extend_from_slice(&image.data()[start..start + crop * c]);
    }
    Tensor::new(&[side, side, c], resize_bilinear(&window, crop, crop, c, side, side))
}

/// One paired training example after augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInput {
    pub source: Tensor,
    pub scale: usize,
    pub label: usize,
    pub target: Tensor,
    pub pseudo: usize,
}

/// Batch objective and its gradient with respect to every parameter.
pub fn objective(
    model: &Model,
    batch: &[PairInput],
    use_pseudo: bool,
    weights: &LossWeights,
    options: &QuadOptions,
    rng: &mut dyn rand::RngCore,
) -> Result<(LossReport, DacsmParams)> {
    let native = model
        .config
        .native_index()
        .ok_or(Error::Spec("native side not in scale set".into()))?;
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let traces: Vec<QuadTrace> = batch
        .iter()
        .map(|p| {
            forward_quad_on(
                &mut g,
                model.ctx(),
                &bound.backbone,
                (&p.source, p.scale),
                (&p.target, native),
                options,
                rng,
            )
        })
        .collect::<Result<_>>()?;
    let items: Vec<LossItem<'_>> = traces
        .iter()
        .zip(batch)
        .map(|(trace, p)| LossItem {
            trace,
            label: p.label,
            scale: p.scale,
        })
        .collect();
    let pseudo: Vec<usize> = batch.iter().map(|p| p.pseudo).collect();
    let (total, report) = total_loss_on(
        &mut g,
        &bound.classifier,
        &items,
        use_pseudo.then_some(&pseudo[..]),
        weights,
    )?;
    let grads = g.backward(total)?;
    Ok((report, model.params.gradients(&bound, &grads)))
}

/// Diagnostics of the model at one point in training.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub eval: EvalReport,
    pub a_distance: f64,
    pub attention_entropy: f64,
    pub source_features: Vec<Tensor>,
    pub target_features: Vec<Tensor>,
}

pub fn snapshot(model: &Model, data: &DomainData) -> Result<Snapshot> {
    let s = embed_all(model, &data.source.images)?;
    let t = embed_all(model, data.target.images())?;
    Ok(Snapshot {
        eval: evaluate_features(model, &t.features, &data.target)?,
        a_distance: a_distance_proxy(&s.features, &t.features)?,
        attention_entropy: t.attention_entropy,
        source_features: s.features,
        target_features: t.features,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 0-based; the row describes the model after this epoch.
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub loss: LossReport,
    pub eval: EvalReport,
    pub a_distance: f64,
    pub attention_entropy: f64,
    /// Whether pairs were rebuilt at the start of this epoch.
    pub refreshed: bool,
    /// Accuracy of the pseudo-labels in use (scored with hidden labels).
    pub pseudo_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// State before the first update.
    pub initial: Snapshot,
    pub history: Vec<EpochMetrics>,
}

/// Runs the adaptation loop for `config.epochs` epochs.
pub fn train(config: &TrainConfig, mut model: Model, data: &DomainData) -> Result<TrainOutcome> {
    config.validate()?;
    if data.source.is_empty() || data.target.is_empty() {
        return Err(Error::Empty("training data"));
    }
    model
        .config
        .native_index()
        .ok_or(Error::Spec("native side not in scale set".into()))?;
    for img in data.target.images() {
        if img.shape()[0] != model.config.native_side || img.shape()[1] != model.config.native_side {
            return Err(Error::Spec(alloc::format!(
                "target images are {}×{}, the model's native side is {}",
                img.shape()[0],
                img.shape()[1],
                model.config.native_side
            )));
        }
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let noise = config.noise();
    let mut noise_rng = noise.rng();
    noise_rng.set_stream(2);
    let options = config.quad_options();
    let mut opt = Sgd::new(config.sgd);

    let initial = snapshot(&model, data)?;
    let mut latest = initial.clone();
    let mut pairs: Vec<DomainPair> = Vec::new();
    let mut history = Vec::with_capacity(config.epochs);
    let k_count = model.config.scales.len();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let refreshed = epoch % config.refresh_interval == 0;
        if refreshed {
            pairs = training_pairs(&latest.source_features, &data.source.labels, &latest.target_features)?;
        }
        let pseudo: Vec<usize> = pairs.iter().map(|p| p.pseudo_label).collect();
        let truth: Vec<usize> = pairs.iter().map(|p| data.target.hidden_labels()[p.target]).collect();
        let pseudo_accuracy = score_predictions(&pseudo, &truth, data.classes)?.avg;
        let use_pseudo = epoch >= config.warmup_epochs;

        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for i in (1..order.len()).rev() {
            let j = order_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = LossReport::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let u: f64 = order_rng.random();
            let scale = ((u * k_count as f64) as usize).min(k_count - 1);
            let side = model.config.scales.side(scale);
            let batch = chunk
                .iter()
                .map(|&i| {
                    let p = pairs[i];
                    Ok(PairInput {
                        source: augment(&mut order_rng, &data.source.images[p.source], config.crop_min, side)?,
                        scale,
                        label: data.source.labels[p.source],
                        target: data.target.images()[p.target].clone(),
                        pseudo: p.pseudo_label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (report, grads) = objective(&model, &batch, use_pseudo, &config.weights, &options, &mut noise_rng)?;
            if let Some(term) = report.first_non_finite() {
                return Err(Error::NonFinite { term, step });
            }
            opt.step(&mut model.params, &grads);
            epoch_loss.accumulate(&report, b);
            step += 1;
        }

        latest = snapshot(&model, data)?;
        history.push(EpochMetrics {
            epoch,
            loss: epoch_loss,
            eval: latest.eval.clone(),
            a_distance: latest.a_distance,
            attention_entropy: latest.attention_entropy,
            refreshed,
            pseudo_accuracy,
        });
    }
    Ok(TrainOutcome {
        model,
        initial,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::random_matrix;

    #[test]
    fn exact_matches_pair_at_distance_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src: Vec<Tensor> = (0..6).map(|_| random_matrix(&mut rng, 1, 4, 1.0)).collect();
        let labels = [0, 1, 2, 0, 1, 2];
        let tgt = [src[4].clone(), src[1].clone()];
        let pairs = pair_features(&src, &labels, &tgt).unwrap();
        assert_eq!((pairs[0].source, pairs[0].distance, pairs[0].pseudo_label), (4, 0.0, 1));
        assert_eq!(pairs[1].source, 1);
    }

    #[test]
    fn single_source_takes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = [random_matrix(&mut rng, 1, 4, 1.0)];
        let tgt: Vec<Tensor> = (0..5).map(|_| random_matrix(&mut rng, 1, 4, 1.0)).collect();
        let pairs = pair_features(&src, &[3], &tgt).unwrap();
        assert!(pairs.iter().all(|p| p.source == 0 && p.pseudo_label == 3));
        assert!(pair_features(&[], &[], &tgt).is_err());
    }

    #[test]
    fn pairing_matches_exhaustive_search_and_ties_go_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let src: Vec<Tensor> = (0..9).map(|_| random_matrix(&mut rng, 1, 3, 1.0)).collect();
            let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
            let tgt: Vec<Tensor> = (0..7).map(|_| random_matrix(&mut rng, 1, 3, 1.0)).collect();
            let pairs = pair_features(&src, &labels, &tgt).unwrap();
            for (t, p) in tgt.iter().zip(&pairs) {
                let dists: Vec<f64> = src.iter().map(|s| s.sub(t).unwrap().frobenius_norm()).collect();
                let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                let first = dists.iter().position(|&d| d == min).unwrap();
                assert_eq!(p.source, first);
                assert!((p.distance - min).abs() < 1e-12);
            }
        }
        let dup = [Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2])];
        let pairs = pair_features(&dup, &[1, 0], &[Tensor::zeros(&[1, 2])]).unwrap();
        assert_eq!(pairs[0].source, 0);
    }

    #[test]
    fn full_crop_is_plain_resize() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_matrix(&mut rng, 24 * 24, 3, 1.0).reshape(&[24, 24, 3]).unwrap();
        let out = augment(&mut rng, &img, 1.0, 24).unwrap();
        assert!(out.bit_eq(&img));
        let small = augment(&mut rng, &img, 0.5, 16).unwrap();
        assert_eq!(small.shape(), &[16, 16, 3]);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let exp = crate::pipeline::Experiment::default();
        let model = exp.initial_model().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<PairInput> = (0..3)
            .map(|k| {
                let side = model.config.scales.side(k);
                PairInput {
                    source: random_matrix(&mut rng, side * side, 3, 1.0)
                        .reshape(&[side, side, 3])
                        .unwrap(),
                    scale: k,
                    label: k,
                    target: random_matrix(&mut rng, 24 * 24, 3, 1.0).reshape(&[24, 24, 3]).unwrap(),
                    pseudo: 3 - k,
                }
            })
            .collect();
        let options = exp.train.quad_options();
        let (report, grads) = objective(
            &model,
            &batch,
            true,
            &exp.train.weights,
            &options,
            &mut exp.train.noise().rng(),
        )
        .unwrap();
        assert!(report.total.is_finite());
        grads.visit(&mut |path, t| {
            assert!(t.data().iter().any(|&v| v != 0.0), "{path} has no gradient");
        });
    }
}
