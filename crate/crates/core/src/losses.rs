//! Training objective: source classification on the self and translated
//! features, distillation from the translated target feature, pseudo-label
//! classification of the target feature and a token-statistics style term.

use alloc::format;
use alloc::vec::Vec;

use crate::csm::SubCenterClassifier;
use crate::dat::QuadTrace;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{channel_stats, log_softmax_in_place, Graph, Tensor, Var};

/// Argument order of the distillation divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// KL(teacher ‖ student).
    #[default]
    TeacherStudent,
    /// KL(student ‖ teacher).
    StudentTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_cls_s: f64,
    pub w_cls_s2t: f64,
    pub w_dst: f64,
    pub w_cls_t: f64,
    pub w_style: f64,
    pub tau_distill: f64,
    pub kl_direction: KlDirection,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cls_s: 1.0,
            w_cls_s2t: 1.0,
            w_dst: 1.0,
            w_cls_t: 1.0,
            w_style: 0.01,
            tau_distill: 2.0,
            kl_direction: KlDirection::TeacherStudent,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_cls_s", self.w_cls_s),
            ("w_cls_s2t", self.w_cls_s2t),
            ("w_dst", self.w_dst),
            ("w_cls_t", self.w_cls_t),
            ("w_style", self.w_style),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Parameter { name, value: w });
            }
        }
        if !(self.tau_distill > 0.0 && self.tau_distill.is_finite()) {
            return Err(Error::Parameter {
                name: "tau_distill",
                value: self.tau_distill,
            });
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self {
            w_cls_s: 0.0,
            w_cls_s2t: 0.0,
            w_dst: 0.0,
            w_cls_t: 0.0,
            w_style: 0.0,
            ..Self::default()
        }
    }
}

/// Batch-mean value of every term and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub cls_s: f64,
    pub cls_s2t: f64,
    pub dst: f64,
    /// Zero when no pseudo-labels were supplied.
    pub cls_t: f64,
    pub style: f64,
    pub total: f64,
}

impl LossReport {
    pub const TERMS: [&'static str; 5] = ["cls_s", "cls_s2t", "dst", "cls_t", "style"];

    pub fn terms(&self) -> [f64; 5] {
        [self.cls_s, self.cls_s2t, self.dst, self.cls_t, self.style]
    }

    /// First term (or the total) that is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::TERMS
            .iter()
            .zip(self.terms())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
            .or((!self.total.is_finite()).then_some("total"))
    }

    /// Running mean update with `n` previous reports.
    pub fn accumulate(&mut self, other: &LossReport, n: usize) {
        let w = 1.0 / (n as f64 + 1.0);
        let mix = |a: &mut f64, b: f64| *a += (b - *a) * w;
        mix(&mut self.cls_s, other.cls_s);
        mix(&mut self.cls_s2t, other.cls_s2t);
        mix(&mut self.dst, other.dst);
        mix(&mut self.cls_t, other.cls_t);
        mix(&mut self.style, other.style);
        mix(&mut self.total, other.total);
    }
}

/// Index of the hot entry of a one-hot vector.
pub fn one_hot_index(y: &Tensor) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in y.data().iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::Label(format!("entry {i} is {v}, expected a one-hot vector")));
        }
    }
    hot.ok_or_else(|| Error::Label("no hot entry".into()))
}

/// `−Σ y_j log softmax(p)_j` for a one-hot `y`.
pub fn cross_entropy(logits: &Tensor, y: &Tensor) -> Result<f64> {
    if logits.numel() != y.numel() {
        return dim_err("cross_entropy", logits.shape(), y.shape());
    }
    let target = one_hot_index(y)?;
    let mut lp = logits.data().to_vec();
    log_softmax_in_place(&mut lp, 1.0);
    Ok(-lp[target])
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter {
            name: "temperature",
            value: tau,
        });
    }
    Ok(())
}

/// KL(softmax(teacher/τ) ‖ softmax(student/τ)).
pub fn distillation(student: &Tensor, teacher: &Tensor, tau: f64) -> Result<f64> {
    distillation_directed(student, teacher, tau, KlDirection::TeacherStudent)
}

pub fn distillation_directed(student: &Tensor, teacher: &Tensor, tau: f64, direction: KlDirection) -> Result<f64> {
    check_tau(tau)?;
    if student.numel() != teacher.numel() {
        return dim_err("distillation", student.shape(), teacher.shape());
    }
    let mut ls = student.data().to_vec();
    let mut lt = teacher.data().to_vec();
    log_softmax_in_place(&mut ls, 1.0 / tau);
    log_softmax_in_place(&mut lt, 1.0 / tau);
    let (lp, lq) = match direction {
        KlDirection::TeacherStudent => (&lt, &ls),
        KlDirection::StudentTeacher => (&ls, &lt),
    };
    let kl: f64 = lp.iter().zip(lq.iter()).map(|(&a, &b)| libm::exp(a) * (a - b)).sum();
    Ok(kl.max(0.0))
}

fn check_layers(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!(
            "style loss over {a} source layers and {b} target layers"
        )));
    }
    if a == 0 {
        return Err(Error::Empty("style loss layers"));
    }
    Ok(())
}

/// Mean over layers of ‖μ_s − μ_t‖ + ‖σ_s − σ_t‖ with per-channel token statistics.
pub fn style_loss(layers_s: &[Tensor], layers_t: &[Tensor]) -> Result<f64> {
    check_layers(layers_s.len(), layers_t.len())?;
    let mut total = 0.0;
    for (s, t) in layers_s.iter().zip(layers_t) {
        if s.cols() != t.cols() {
            return dim_err("style_loss", s.shape(), t.shape());
        }
        let (ms, ss) = channel_stats(s)?;
        let (mt, st) = channel_stats(t)?;
        total += ms.sub(&mt)?.frobenius_norm() + ss.sub(&st)?.frobenius_norm();
    }
    Ok(total / layers_s.len() as f64)
}

/// Differentiable KL between softened logits; the teacher is detached.
pub fn distillation_on(g: &mut Graph, student: Var, teacher: Var, tau: f64, direction: KlDirection) -> Result<Var> {
    check_tau(tau)?;
    let teacher = g.detach(teacher);
    let ls = g.log_softmax_rows(student, tau)?;
    let lt = g.log_softmax_rows(teacher, tau)?;
    let (lp, lq) = match direction {
        KlDirection::TeacherStudent => (lt, ls),
        KlDirection::StudentTeacher => (ls, lt),
    };
    let p = match direction {
        KlDirection::TeacherStudent => g.softmax_rows(teacher, tau)?,
        KlDirection::StudentTeacher => g.softmax_rows(student, tau)?,
    };
    let diff = g.sub(lp, lq)?;
    let prod = g.mul(p, diff)?;
    Ok(g.sum(prod))
}

fn channel_stats_on(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let n = g.value(x).rows();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            op: "channel_stats",
            needed: 2,
            got: n,
        });
    }
    let mean = g.mean_rows(x)?;
    let neg = g.scale(mean, -1.0);
    let centered = g.add_row(x, neg)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_rows(sq)?;
    let std = g.sqrt(var)?;
    Ok((mean, std))
}

pub fn style_loss_on(g: &mut Graph, layers_s: &[Var], layers_t: &[Var]) -> Result<Var> {
    check_layers(layers_s.len(), layers_t.len())?;
    let mut terms = Vec::with_capacity(2 * layers_s.len());
    for (&s, &t) in layers_s.iter().zip(layers_t) {
        if g.value(s).cols() != g.value(t).cols() {
            return dim_err("style_loss", g.value(s).shape(), g.value(t).shape());
        }
        let (ms, ss) = channel_stats_on(g, s)?;
        let (mt, st) = channel_stats_on(g, t)?;
        let dm = g.sub(ms, mt)?;
        let ds = g.sub(ss, st)?;
        terms.push(g.l2_norm(dm)?);
        terms.push(g.l2_norm(ds)?);
    }
    let sum = sum_vars(g, &terms)?;
    Ok(g.scale(sum, 1.0 / layers_s.len() as f64))
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

fn mean_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let s = sum_vars(g, vars)?;
    Ok(g.scale(s, 1.0 / vars.len() as f64))
}

/// One paired sample of a batch.
#[derive(Debug, Clone, Copy)]
pub struct LossItem<'a> {
    pub trace: &'a QuadTrace,
    /// Source label.
    pub label: usize,
    /// Scale index the source image was rendered at.
    pub scale: usize,
}

/// Batch-mean objective. `pseudo`, when present, holds one target label per item;
/// without it the target classification term is skipped.
pub fn total_loss_on(
    g: &mut Graph,
    classifier: &SubCenterClassifier<Var>,
    items: &[LossItem<'_>],
    pseudo: Option<&[usize]>,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    if items.is_empty() {
        return Err(Error::Contract("total loss over an empty batch".into()));
    }
    if let Some(p) = pseudo {
        if p.len() != items.len() {
            return Err(Error::Contract(format!(
                "{} pseudo-labels for {} samples",
                p.len(),
                items.len()
            )));
        }
    }
    let classes = classifier.classes;
    let check_label = |y: usize, what: &str| {
        if y >= classes {
            Err(Error::Label(format!("{what} {y} out of range for {classes} classes")))
        } else {
            Ok(())
        }
    };

    let n = items.len();
    let (mut cls_s, mut cls_s2t, mut dst, mut cls_t, mut style) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for (i, item) in items.iter().enumerate() {
        check_label(item.label, "source label")?;
        let q = &item.trace.quad;
        let ls = classifier.source_logits_on(g, q.f_s, item.scale)?;
        cls_s.push(g.cross_entropy(ls, item.label)?);
        let ls2t = classifier.source_logits_on(g, q.f_s2t, item.scale)?;
        cls_s2t.push(g.cross_entropy(ls2t, item.label)?);

        let (lt, _) = classifier.target_logits_on(g, q.f_t)?;
        let (lt2s, _) = classifier.target_logits_on(g, q.f_t2s)?;
        dst.push(distillation_on(g, lt, lt2s, weights.tau_distill, weights.kl_direction)?);
        if let Some(p) = pseudo {
            check_label(p[i], "pseudo-label")?;
            cls_t.push(g.cross_entropy(lt, p[i])?);
        }
        style.push(style_loss_on(g, &item.trace.layers_s, &item.trace.layers_t)?);
    }

    let mut report = LossReport::default();
    let mut weighted = Vec::with_capacity(5);
    let mut add_term = |g: &mut Graph, vars: &[Var], w: f64, slot: &mut f64| -> Result<()> {
        if vars.is_empty() {
            return Ok(());
        }
        let m = mean_vars(g, vars)?;
        *slot = g.value(m).data()[0];
        weighted.push(g.scale(m, w));
        Ok(())
    };
    add_term(g, &cls_s, weights.w_cls_s, &mut report.cls_s)?;
    add_term(g, &cls_s2t, weights.w_cls_s2t, &mut report.cls_s2t)?;
    add_term(g, &dst, weights.w_dst, &mut report.dst)?;
    add_term(g, &cls_t, weights.w_cls_t, &mut report.cls_t)?;
    add_term(g, &style, weights.w_style, &mut report.style)?;
    let total = sum_vars(g, &weighted)?;
    report.total = g.value(total).data()[0];
    Ok((total, report))
}
