//! Target accuracy, domain discrepancy and attention diagnostics.

use alloc::vec;
use alloc::vec::Vec;

use crate::csm::{argmax, rescale};
use crate::dat::{embed, Model};
use crate::error::{Error, Result};
use crate::numerics::{entropy, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{SourceSet, TargetSet};

/// Accuracy per class (fraction in [0, 1]) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<f64>,
    /// Mean of the per-class accuracies over classes that occur.
    pub avg: f64,
    pub predictions: Vec<usize>,
}

/// Scores predictions against labels for `classes` classes.
pub fn score_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Contract(alloc::format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: y,
                len: classes,
            });
        }
        counts[y] += 1;
        hits[y] += (p == y) as usize;
    }
    let per_class: Vec<f64> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &n)| if n == 0 { f64::NAN } else { h as f64 / n as f64 })
        .collect();
    let present: Vec<f64> = per_class.iter().copied().filter(|v| !v.is_nan()).collect();
    let avg = present.iter().sum::<f64>() / present.len() as f64;
    Ok(EvalReport {
        per_class,
        avg,
        predictions: predictions.to_vec(),
    })
}

/// Brings an image to the model's native side if it is not already there.
pub(crate) fn at_native(model: &Model, image: &Tensor) -> Result<Tensor> {
    let side = model.config.native_side;
    if image.shape()[0] == side && image.shape()[1] == side {
        Ok(image.clone())
    } else {
        rescale(image, side, model.config.patch)
    }
}

/// Native-resolution features of a set of images plus the mean attention entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub features: Vec<Tensor>,
    pub attention_entropy: f64,
}

pub fn embed_all(model: &Model, images: &[Tensor]) -> Result<Embedded> {
    let k = model
        .config
        .native_index()
        .ok_or(Error::Spec("native side not in scale set".into()))?;
    let mut features = Vec::with_capacity(images.len());
    let (mut h_sum, mut h_n) = (0.0, 0usize);
    for img in images {
        let img = at_native(model, img)?;
        let (f, attention) = embed(model, &img, k)?;
        for w in &attention {
            let m = w.shape()[2];
            for row in w.data().chunks(m) {
                h_sum += entropy(row);
                h_n += 1;
            }
        }
        features.push(f);
    }
    Ok(Embedded {
        features,
        attention_entropy: if h_n == 0 { 0.0 } else { h_sum / h_n as f64 },
    })
}

/// Class predicted from a feature by the per-class maximum over sub-centers.
pub fn predict(model: &Model, feature: &Tensor) -> Result<usize> {
    let (logits, _) = model.params.classifier.target_logits(feature)?;
    Ok(argmax(logits.data().iter().copied()).0)
}

/// One native-resolution forward per target image, predictions by target logits.
pub fn evaluate(model: &Model, target: &TargetSet) -> Result<EvalReport> {
    if target.is_empty() {
        return Err(Error::Empty("target set"));
    }
    let emb = embed_all(model, target.images())?;
    evaluate_features(model, &emb.features, target)
}

pub(crate) fn evaluate_features(model: &Model, features: &[Tensor], target: &TargetSet) -> Result<EvalReport> {
    let preds = features.iter().map(|f| predict(model, f)).collect::<Result<Vec<_>>>()?;
    score_predictions(&preds, target.hidden_labels(), model.config.classes)
}

/// Sub-center selection matrices of the trained classifier, one per class,
/// from every source image rescaled to every scale of the set.
pub fn specialization(model: &Model, source: &SourceSet) -> Result<Vec<Tensor>> {
    let scales = &model.config.scales;
    let mut bank: Vec<Vec<Vec<Tensor>>> = vec![vec![Vec::new(); scales.len()]; model.config.classes];
    for (img, &y) in source.images.iter().zip(&source.labels) {
        for k in 0..scales.len() {
            let scaled = rescale(img, scales.side(k), model.config.patch)?;
            let (f, _) = embed(model, &scaled, k)?;
            bank.get_mut(y).ok_or(Error::IndexOutOfRange {
                what: "label",
                index: y,
                len: model.config.classes,
            })?[k]
                .push(f);
        }
    }
    model.params.classifier.specialization_probe(&bank)
}

/// `2(1 − 2ε)` clamped to [0, 2], with ε the held-out error of a logistic
/// domain discriminator. Each domain is split in half by a fixed shuffle; the
/// discriminator is fitted on one half and scored on the other, both ways,
/// and ε is the mean of the two errors.
pub fn a_distance_proxy(features_s: &[Tensor], features_t: &[Tensor]) -> Result<f64> {
    const MIN: usize = 20;
    for n in [features_s.len(), features_t.len()] {
        if n < MIN {
            return Err(Error::InsufficientSamples {
                op: "a_distance_proxy",
                needed: MIN,
                got: n,
            });
        }
    }
    let d = features_s[0].numel();
    if features_s.iter().chain(features_t).any(|f| f.numel() != d) {
        return Err(Error::Contract("a_distance_proxy features differ in width".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut halves: [Vec<(&[f64], f64)>; 2] = [Vec::new(), Vec::new()];
    for (set, y) in [(features_s, 0.0), (features_t, 1.0)] {
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng);
        for (rank, &i) in order.iter().enumerate() {
            halves[(rank % 2 == 1) as usize].push((set[i].data(), y));
        }
    }
    let eps = 0.5 * (discriminator_error(&halves[0], &halves[1], d) + discriminator_error(&halves[1], &halves[0], d));
    Ok((2.0 * (1.0 - 2.0 * eps)).clamp(0.0, 2.0))
}

fn discriminator_error(train: &[(&[f64], f64)], test: &[(&[f64], f64)], d: usize) -> f64 {
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for (x, _) in train {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for (x, _) in train {
        for ((s, v), m) in std.iter_mut().zip(x.iter()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let scale: Vec<f64> = std.iter().map(|&v| 1.0 / libm::sqrt(v + 1e-12)).collect();
    let norm = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect() };
    let train: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (norm(x), *y)).collect();

    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let (lr, l2, iters) = (0.5, 1e-2, 300);
    for _ in 0..iters {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &train {
            let z = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + libm::exp(-z));
            let e = (p - y) / n;
            gb += e;
            for (g, v) in gw.iter_mut().zip(x) {
                *g += e * v;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * (gi + l2 * *wi);
        }
        b -= lr * gb;
    }

    let errors = test
        .iter()
        .filter(|(x, y)| {
            let x = norm(x);
            let z = b + w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>();
            (z >= 0.0) != (*y > 0.5)
        })
        .count();
    errors as f64 / test.len() as f64
}
