//! Cross-scale matching: multi-resolution source inputs and a sub-center
//! classifier with one linear head per scale.
//!
//! Source features are scored by the head of the scale they were rendered at.
//! Target features, whose scale is unknown, take the per-class maximum over
//! heads. At evaluation only the target at its native resolution is embedded.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::resample::resize_bilinear;

/// Fixed, ordered set of square input sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSet {
    sides: Vec<usize>,
}

impl ScaleSet {
    pub fn new(sides: Vec<usize>, patch: usize) -> Result<Self> {
        if sides.is_empty() {
            return Err(Error::Spec("scale set needs at least one side".into()));
        }
        for &s in &sides {
            if s == 0 || patch == 0 || s % patch != 0 {
                return Err(Error::Tiling {
                    height: s,
                    width: s,
                    patch,
                });
            }
        }
        for (i, s) in sides.iter().enumerate() {
            if sides[..i].contains(s) {
                return Err(Error::Spec(alloc::format!("duplicate scale side {s}")));
            }
        }
        Ok(Self { sides })
    }

    pub fn len(&self) -> usize {
        self.sides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sides.is_empty()
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    pub fn side(&self, k: usize) -> usize {
        self.sides[k]
    }

    pub fn index_of(&self, side: usize) -> Option<usize> {
        self.sides.iter().position(|&s| s == side)
    }
}

/// Bilinear resize of an H×W×C image to side×side×C.
pub fn rescale(image: &Tensor, side: usize, patch: usize) -> Result<Tensor> {
    if image.shape().len() != 3 {
        return dim_err("rescale", image.shape(), &[]);
    }
    if side == 0 || patch == 0 || side % patch != 0 {
        return Err(Error::Parameter {
            name: "rescale side",
            value: side as f64,
        });
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let data = resize_bilinear(image.data(), h, w, c, side, side);
    Tensor::new(&[side, side, c], data)
}

/// Per-class, per-scale linear heads. Weights are stored row-major as
/// `[classes, subcenters, dim]`; row `c * subcenters + k` is head `(c, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubCenterClassifier<T = Tensor> {
    pub weights: T,
    pub classes: usize,
    pub subcenters: usize,
}

impl SubCenterClassifier {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.shape().len() != 3 {
            return dim_err("sub-center classifier", weights.shape(), &[]);
        }
        let (classes, subcenters) = (weights.shape()[0], weights.shape()[1]);
        Ok(Self {
            weights,
            classes,
            subcenters,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn weight(&self, class: usize, k: usize) -> &[f64] {
        let d = self.dim();
        let off = (class * self.subcenters + k) * d;
        &self.weights.data()[off..off + d]
    }

    /// Ordinary linear classifier (D×C) of sub-center `k`.
    pub fn head(&self, k: usize) -> Result<Tensor> {
        self.check_scale(k)?;
        let d = self.dim();
        let mut out = vec![0.0; d * self.classes];
        for c in 0..self.classes {
            for (i, &w) in self.weight(c, k).iter().enumerate() {
                out[i * self.classes + c] = w;
            }
        }
        Tensor::new(&[d, self.classes], out)
    }

    fn check_scale(&self, k: usize) -> Result<()> {
        if k >= self.subcenters {
            return Err(Error::IndexOutOfRange {
                what: "scale",
                index: k,
                len: self.subcenters,
            });
        }
        Ok(())
    }

    fn check_feature(&self, f: &Tensor) -> Result<()> {
        if f.numel() != self.dim() {
            return dim_err("sub-center logits", f.shape(), &[self.dim()]);
        }
        Ok(())
    }

    fn score(&self, f: &[f64], class: usize, k: usize) -> f64 {
        self.weight(class, k).iter().zip(f).map(|(a, b)| a * b).sum()
    }

    /// Logits from sub-center `k` only.
    pub fn source_logits(&self, f: &Tensor, k: usize) -> Result<Tensor> {
        self.check_scale(k)?;
        self.check_feature(f)?;
        Ok(Tensor::row_vector(
            (0..self.classes).map(|c| self.score(f.data(), c, k)).collect(),
        ))
    }

    /// Per-class maximum over sub-centers and the chosen sub-center per class.
    pub fn target_logits(&self, f: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        self.check_feature(f)?;
        let mut logits = Vec::with_capacity(self.classes);
        let mut chosen = Vec::with_capacity(self.classes);
        for c in 0..self.classes {
            let (k, v) = argmax((0..self.subcenters).map(|k| self.score(f.data(), c, k)));
            logits.push(v);
            chosen.push(k);
        }
        Ok((Tensor::row_vector(logits), chosen))
    }

    /// Fraction of scale-`k` features of class `c` whose class-`c` logit is
    /// maximised by sub-center `k'`, as one K×K matrix per class.
    /// `bank[c][k]` holds the features of class `c` rendered at scale `k`.
    pub fn specialization_probe(&self, bank: &[Vec<Vec<Tensor>>]) -> Result<Vec<Tensor>> {
        if bank.len() != self.classes {
            return dim_err("specialization_probe", &[bank.len()], &[self.classes]);
        }
        let kk = self.subcenters;
        let mut out = Vec::with_capacity(self.classes);
        for (c, per_scale) in bank.iter().enumerate() {
            if per_scale.len() != kk {
                return dim_err("specialization_probe", &[per_scale.len()], &[kk]);
            }
            let mut m = vec![0.0; kk * kk];
            for (k, feats) in per_scale.iter().enumerate() {
                if feats.is_empty() {
                    return Err(Error::InsufficientSamples {
                        op: "specialization_probe",
                        needed: 1,
                        got: 0,
                    });
                }
                for f in feats {
                    self.check_feature(f)?;
                    let (best, _) = argmax((0..kk).map(|k2| self.score(f.data(), c, k2)));
                    m[k * kk + best] += 1.0 / feats.len() as f64;
                }
            }
            out.push(Tensor::new(&[kk, kk], m)?);
        }
        Ok(out)
    }
}

/// Mean of the diagonal and mean of the off-diagonal entries of a square matrix.
/// For K = 1 the off-diagonal mean is reported as 0.
pub fn diagonal_split(m: &Tensor) -> (f64, f64) {
    let k = m.rows();
    let diag: f64 = (0..k).map(|i| m.at(i, i)).sum::<f64>() / k as f64;
    if k == 1 {
        return (diag, 0.0);
    }
    let total: f64 = m.sum();
    let off = (total - diag * k as f64) / (k * k - k) as f64;
    (diag, off)
}

/// Index and value of the maximum; ties go to the lowest index.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 || i == 0 {
            best = (i, v);
        }
    }
    best
}

/// Graph-bound sub-center classifier; `weights` is a `[classes * subcenters, dim]` node.
impl SubCenterClassifier<Var> {
    fn all_logits(&self, g: &mut Graph, f: Var) -> Result<Var> {
        g.matmul_nt(f, self.weights)
    }

    pub fn source_logits_on(&self, g: &mut Graph, f: Var, k: usize) -> Result<Var> {
        if k >= self.subcenters {
            return Err(Error::IndexOutOfRange {
                what: "scale",
                index: k,
                len: self.subcenters,
            });
        }
        let all = self.all_logits(g, f)?;
        let idx: Vec<usize> = (0..self.classes).map(|c| c * self.subcenters + k).collect();
        g.gather(all, &idx)
    }

    /// Max over sub-centers per class; the gradient follows the chosen head.
    pub fn target_logits_on(&self, g: &mut Graph, f: Var) -> Result<(Var, Vec<usize>)> {
        let all = self.all_logits(g, f)?;
        let kk = self.subcenters;
        let chosen: Vec<usize> = {
            let v = g.value(all).data();
            (0..self.classes)
                .map(|c| argmax(v[c * kk..(c + 1) * kk].iter().copied()).0)
                .collect()
        };
        let idx: Vec<usize> = chosen.iter().enumerate().map(|(c, &k)| c * kk + k).collect();
        Ok((g.gather(all, &idx)?, chosen))
    }
}
