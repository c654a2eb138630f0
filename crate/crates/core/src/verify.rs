//! Seeded property suites for style matching, attention sensitivity,
//! sub-center specialisation and analytic gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, random_matrix, soft_style_attention, style_swap_hard, AttentionParams, NoiseSpec};
use crate::csm::{diagonal_split, SubCenterClassifier};
use crate::dat::{forward_quad, InitSpec, Model, ModelConfig, NoiseLayers, QuadOptions};
use crate::error::{Error, Result};
use crate::losses::{distillation_directed, LossWeights};
use crate::numerics::{kl_divergence, min_singular_value, Graph, Tensor, Var};
use crate::pipeline::{objective, specialization, Experiment, PairInput};

/// The suites runnable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    StyleLimit,
    AttentionChange,
    Specialization,
    Gradients,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::StyleLimit,
        Suite::AttentionChange,
        Suite::Specialization,
        Suite::Gradients,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::StyleLimit => "appendix-a",
            Self::AttentionChange => "appendix-b",
            Self::Specialization => "appendix-c",
            Self::Gradients => "gradients",
        }
    }

    /// `all` expands to every suite.
    pub fn parse(name: &str) -> Option<Vec<Suite>> {
        if name == "all" {
            return Some(Self::ALL.to_vec());
        }
        Self::ALL.iter().find(|s| s.name() == name).map(|s| vec![*s])
    }

    pub fn run(self) -> Result<SuiteReport> {
        match self {
            Self::StyleLimit => style_limit(&StyleLimit::default()),
            Self::AttentionChange => attention_change(&AttentionChange::default()),
            Self::Specialization => {
                let mut report = specialization_constructed(&Specialization::default())?;
                let trained = specialization_trained(&Experiment::default())?;
                report.checks.extend(trained.checks);
                report.table.extend(trained.table);
                Ok(report)
            }
            Self::Gradients => {
                let mut report = gradients_ops(&GradientCheck::default())?;
                let total = gradients_total_loss(&GradientCheck::default())?;
                report.checks.extend(total.checks);
                report.table.extend(total.table);
                Ok(report)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of one suite: asserted checks plus informational rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
    pub table: Vec<String>,
}

impl SuiteReport {
    fn new(suite: &'static str) -> Self {
        Self {
            suite,
            checks: Vec::new(),
            table: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check_named(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Printable rows: the table first, then one `PASS`/`FAIL` line per check.
    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self.table.iter().map(|t| format!("[{}] {}", self.suite, t)).collect();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            out.push(format!("[{}] {} {}: {}", self.suite, tag, c.name, c.detail));
        }
        out
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut m = random_matrix(rng, rows, cols, 1.0);
    for r in 0..rows {
        let row = &mut m.data_mut()[r * cols..(r + 1) * cols];
        let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        row.iter_mut().for_each(|v| *v /= n);
    }
    m
}

/// Smallest gap, over content rows, between the best and second-best cosine match.
fn top2_margin(content: &Tensor, style: &Tensor) -> f64 {
    let mut margin = f64::INFINITY;
    for i in 0..content.rows() {
        let mut sims: Vec<f64> = (0..style.rows())
            .map(|j| content.row(i).iter().zip(style.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        sims.sort_by(|a, b| b.total_cmp(a));
        if sims.len() > 1 {
            margin = margin.min(sims[0] - sims[1]);
        }
    }
    margin
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleLimit {
    pub pairs: usize,
    pub content_rows: usize,
    pub style_rows: usize,
    pub dim: usize,
    pub temperatures: Vec<f64>,
    /// Instances whose hard match is nearly tied are redrawn.
    pub min_margin: f64,
    pub final_tolerance: f64,
    pub seed: u64,
}

impl Default for StyleLimit {
    fn default() -> Self {
        Self {
            pairs: 50,
            content_rows: 9,
            style_rows: 4,
            dim: 8,
            temperatures: vec![1.0, 0.1, 0.01, 0.001],
            min_margin: 0.02,
            final_tolerance: 1e-6,
            seed: 0xA,
        }
    }
}

/// Soft style attention converges to the hard style swap as τ → 0.
pub fn style_limit(cfg: &StyleLimit) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::StyleLimit.name());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = vec![0.0f64; cfg.temperatures.len()];
    let (mut monotone_fail, mut final_fail, mut redrawn) = (0usize, 0usize, 0usize);
    for _ in 0..cfg.pairs {
        let (content, style) = loop {
            let c = unit_rows(&mut rng, cfg.content_rows, cfg.dim);
            let s = unit_rows(&mut rng, cfg.style_rows, cfg.dim);
            if top2_margin(&c, &s) >= cfg.min_margin {
                break (c, s);
            }
            redrawn += 1;
        };
        let (hard, _) = style_swap_hard(&content, &style)?;
        let gaps = cfg
            .temperatures
            .iter()
            .map(|&t| Ok(soft_style_attention(&content, &style, t)?.max_abs_diff(&hard)))
            .collect::<Result<Vec<f64>>>()?;
        if gaps.windows(2).any(|w| !(w[1] < w[0] || w[0] == 0.0)) {
            monotone_fail += 1;
        }
        if gaps.last().is_some_and(|&g| !(g < cfg.final_tolerance)) {
            final_fail += 1;
        }
        for (w, g) in worst.iter_mut().zip(&gaps) {
            *w = w.max(*g);
        }
    }
    report.table.push(format!(
        "{} pairs ({}x{} content, {}x{} style), {} near-tied draws replaced",
        cfg.pairs, cfg.content_rows, cfg.dim, cfg.style_rows, cfg.dim, redrawn
    ));
    report.table.push(String::from("tau        max sup-norm gap"));
    for (t, w) in cfg.temperatures.iter().zip(&worst) {
        report.table.push(format!("{t:<10} {w:.3e}"));
    }
    report.check(
        "gap decreases with temperature",
        monotone_fail == 0,
        format!("{monotone_fail} of {} pairs non-monotone", cfg.pairs),
    );
    let last = cfg.temperatures.last().copied().unwrap_or(f64::NAN);
    report.check(
        "gap below tolerance at the coldest temperature",
        final_fail == 0,
        format!(
            "max gap {:.3e} at tau={last} (tolerance {:.0e})",
            worst.last().copied().unwrap_or(f64::NAN),
            cfg.final_tolerance
        ),
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionChange {
    pub instances: usize,
    pub dim: usize,
    /// Tokens per instance are drawn from 2..=max_tokens (≤ dim).
    pub max_tokens: usize,
    /// Standard deviation of the query-side shift from z_src to z_tgt.
    pub shift: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for AttentionChange {
    fn default() -> Self {
        Self {
            instances: 200,
            dim: 8,
            max_tokens: 8,
            shift: 0.5,
            tolerance: 1e-10,
            seed: 0xB,
        }
    }
}

/// Rates of the attention-sensitivity chain, counted per query row.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChainCounts {
    pub rows: usize,
    pub instances: usize,
    pub pinsker: usize,
    pub frobenius: usize,
    pub reversed_pinsker: usize,
    pub combined: usize,
    pub reconstruction: usize,
}

/// Counts violations of the attention-change chain on random single-head instances:
/// keys and values are fixed to `z_src`, queries come from `z_src` or `z_tgt`.
pub fn attention_chain(cfg: &AttentionChange) -> Result<ChainCounts> {
    if cfg.max_tokens < 2 || cfg.max_tokens > cfg.dim {
        return Err(Error::Spec(format!(
            "token count must be in 2..={}, got max {}",
            cfg.dim, cfg.max_tokens
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut counts = ChainCounts {
        instances: cfg.instances,
        ..ChainCounts::default()
    };
    let d = cfg.dim;
    let tol = cfg.tolerance;
    for _ in 0..cfg.instances {
        let n = rng.random_range(2..=cfg.max_tokens);
        let s = 1.0 / libm::sqrt(d as f64);
        let params = AttentionParams {
            w_q: random_matrix(&mut rng, d, d, 2.0 * s),
            w_k: random_matrix(&mut rng, d, d, 2.0 * s),
            w_v: random_matrix(&mut rng, d, d, s),
            heads: 1,
        };
        let z_src = random_matrix(&mut rng, n, d, 1.0);
        let z_tgt = z_src.add(&random_matrix(&mut rng, n, d, cfg.shift))?;
        let mut no_rng = NoiseSpec::OFF.rng();
        let (out_src, a_src) = attend(&params, &z_src, &z_src, &NoiseSpec::OFF, &mut no_rng)?;
        let (out_tgt, a_tgt) = attend(&params, &z_tgt, &z_src, &NoiseSpec::OFF, &mut no_rng)?;
        let a_src = a_src.reshape(&[n, n])?;
        let a_tgt = a_tgt.reshape(&[n, n])?;
        let v = z_src.matmul(&params.w_v)?;
        let sigma_min = min_singular_value(&v);

        let delta = a_src.sub(&a_tgt)?;
        let dz = delta.matmul(&v)?;
        if dz.max_abs_diff(&out_src.sub(&out_tgt)?) > 1e-12 {
            counts.reconstruction += 1;
        }
        if dz.frobenius_norm() + tol < sigma_min * delta.frobenius_norm() {
            counts.frobenius += 1;
        }
        for i in 0..n {
            counts.rows += 1;
            let kl = kl_divergence(a_src.row(i), a_tgt.row(i))?;
            let l1: f64 = a_src.row(i).iter().zip(a_tgt.row(i)).map(|(p, q)| (p - q).abs()).sum();
            let bound = libm::sqrt(2.0 * kl);
            if l1 > bound + tol {
                counts.pinsker += 1;
            }
            if l1 + tol < bound {
                counts.reversed_pinsker += 1;
            }
            let dz_i = libm::sqrt(dz.row(i).iter().map(|x| x * x).sum::<f64>());
            if dz_i + tol < sigma_min / core::f64::consts::SQRT_2 * kl {
                counts.combined += 1;
            }
        }
    }
    Ok(counts)
}

/// Pinsker and the σ_min bound are asserted; the reversed Pinsker step and the
/// combined λ·KL bound that relies on it are reported as violation rates.
pub fn attention_change(cfg: &AttentionChange) -> Result<SuiteReport> {
    let c = attention_chain(cfg)?;
    let mut report = SuiteReport::new(Suite::AttentionChange.name());
    let rate = |k: usize| 100.0 * k as f64 / c.rows as f64;
    report.table.push(format!(
        "{} instances, {} query rows, d={}, tokens 2..={}",
        c.instances, c.rows, cfg.dim, cfg.max_tokens
    ));
    report.table.push(format!(
        "reported: ||da||_1 >= sqrt(2 KL) violated on {} rows ({:.1}%)",
        c.reversed_pinsker,
        rate(c.reversed_pinsker)
    ));
    report.table.push(format!(
        "reported: ||dz_i|| >= sigma_min/sqrt(2) * KL violated on {} rows ({:.1}%)",
        c.combined,
        rate(c.combined)
    ));
    report.check(
        "pinsker",
        c.pinsker == 0,
        format!("||da||_1 <= sqrt(2 KL): {} violations in {} rows", c.pinsker, c.rows),
    );
    report.check(
        "sigma-min frobenius bound",
        c.frobenius == 0,
        format!(
            "||da V||_F >= sigma_min(V) ||da||_F: {} violations in {} instances",
            c.frobenius, c.instances
        ),
    );
    report.check(
        "output change equals weight change times values",
        c.reconstruction == 0,
        format!("{} mismatches", c.reconstruction),
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Specialization {
    pub classes: usize,
    pub subcenters: usize,
    pub dim: usize,
    /// Norm of every cluster mean.
    pub radius: f64,
    /// Within-cluster standard deviation.
    pub sigma: f64,
    /// Minimum distance between cluster means in units of `sigma`.
    pub separation: f64,
    pub samples: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for Specialization {
    fn default() -> Self {
        Self {
            classes: 4,
            subcenters: 3,
            dim: 16,
            radius: 3.0,
            sigma: 0.1,
            separation: 5.0,
            samples: 40,
            threshold: 0.95,
            seed: 0xC,
        }
    }
}

/// A classifier whose sub-centers sit on well-separated cluster means routes
/// every scale's samples to its own sub-center.
pub fn specialization_constructed(cfg: &Specialization) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, k, d) = (cfg.classes, cfg.subcenters, cfg.dim);
    let means = loop {
        let m = unit_rows(&mut rng, c * k, d).scale(cfg.radius);
        let mut closest = f64::INFINITY;
        for i in 0..c * k {
            for j in i + 1..c * k {
                let dist: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                closest = closest.min(libm::sqrt(dist));
            }
        }
        if closest >= cfg.separation * cfg.sigma {
            break (m, closest);
        }
    };
    let (means, closest) = means;
    let classifier = SubCenterClassifier::new(means.clone().reshape(&[c, k, d])?)?;
    let bank: Vec<Vec<Vec<Tensor>>> = (0..c)
        .map(|ci| {
            (0..k)
                .map(|ki| {
                    let mu = Tensor::row_vector(means.row(ci * k + ki).to_vec());
                    (0..cfg.samples)
                        .map(|_| mu.add(&random_matrix(&mut rng, 1, d, cfg.sigma)))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let probe = classifier.specialization_probe(&bank)?;
    let mut report = SuiteReport::new(Suite::Specialization.name());
    report.table.push(format!(
        "constructed: {c} classes x {k} sub-centers, closest means {:.1} sigma apart",
        closest / cfg.sigma
    ));
    let diags: Vec<f64> = probe.iter().map(|m| diagonal_split(m).0).collect();
    let worst = diags.iter().copied().fold(f64::INFINITY, f64::min);
    let shown: Vec<String> = diags.iter().map(|v| format!("{v:.3}")).collect();
    report.check(
        "constructed classifier specialises",
        diags.iter().all(|&v| v > cfg.threshold),
        format!(
            "diagonal fraction per class [{}], min {worst:.3} > {}",
            shown.join(", "),
            cfg.threshold
        ),
    );
    Ok(report)
}

/// After one training run, sub-center selection concentrates on the diagonal.
pub fn specialization_trained(experiment: &Experiment) -> Result<SuiteReport> {
    let (data, outcome) = experiment.run()?;
    let probe = specialization(&outcome.model, &data.source)?;
    let mut report = SuiteReport::new(Suite::Specialization.name());
    let k = outcome.model.config.scales.len();
    let mut mean = Tensor::zeros(&[k, k]);
    for (c, m) in probe.iter().enumerate() {
        mean = mean.add(&m.scale(1.0 / probe.len() as f64))?;
        let (dg, off) = diagonal_split(m);
        report
            .table
            .push(format!("trained class {c}: diagonal {dg:.3}, off-diagonal {off:.3}"));
    }
    let (dg, off) = diagonal_split(&mean);
    report.check(
        "trained classifier specialises",
        dg > off,
        format!("class-averaged diagonal {dg:.3} vs off-diagonal {off:.3}"),
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Relative errors divide by at least this magnitude.
    pub floor: f64,
    /// total_loss trials: models × coordinates per model.
    pub models: usize,
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradientCheck {
    fn default() -> Self {
        Self {
            trials: 100,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            models: 10,
            coordinates: 10,
            seed: 0x6,
        }
    }
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Differentiable graph operations with the input shapes they are checked at.
fn op_cases() -> Vec<(&'static str, Vec<[usize; 2]>, OpFn)> {
    vec![
        ("matmul", vec![[3, 4], [4, 2]], |g, x| g.matmul(x[0], x[1])),
        ("matmul_nt", vec![[3, 4], [2, 4]], |g, x| g.matmul_nt(x[0], x[1])),
        ("transpose", vec![[3, 4]], |g, x| g.transpose(x[0])),
        ("add", vec![[3, 4], [3, 4]], |g, x| g.add(x[0], x[1])),
        ("sub", vec![[3, 4], [3, 4]], |g, x| g.sub(x[0], x[1])),
        ("mul", vec![[3, 4], [3, 4]], |g, x| g.mul(x[0], x[1])),
        ("add_row", vec![[3, 4], [1, 4]], |g, x| g.add_row(x[0], x[1])),
        ("mul_row", vec![[3, 4], [1, 4]], |g, x| g.mul_row(x[0], x[1])),
        ("scale", vec![[3, 4]], |g, x| Ok(g.scale(x[0], -1.7))),
        ("softmax_rows", vec![[3, 5]], |g, x| g.softmax_rows(x[0], 0.7)),
        ("log_softmax_rows", vec![[3, 5]], |g, x| g.log_softmax_rows(x[0], 1.3)),
        ("layer_norm", vec![[3, 5]], |g, x| g.layer_norm(x[0], 1e-5)),
        ("gelu", vec![[3, 4]], |g, x| Ok(g.gelu(x[0]))),
        ("sqrt", vec![[3, 4]], |g, x| g.sqrt(x[0])),
        ("slice_cols", vec![[3, 4]], |g, x| g.slice_cols(x[0], 1, 2)),
        ("concat_cols", vec![[3, 2], [3, 3]], |g, x| g.concat_cols(&[x[0], x[1]])),
        ("slice_rows", vec![[4, 3]], |g, x| g.slice_rows(x[0], 1, 2)),
        ("concat_rows", vec![[2, 3], [1, 3]], |g, x| g.concat_rows(&[x[0], x[1]])),
        ("gather", vec![[3, 4]], |g, x| g.gather(x[0], &[0, 2, 2, 1])),
        ("sum", vec![[3, 4]], |g, x| Ok(g.sum(x[0]))),
        ("mean_rows", vec![[3, 4]], |g, x| g.mean_rows(x[0])),
        ("cross_entropy", vec![[1, 5]], |g, x| g.cross_entropy(x[0], 2)),
        ("l2_norm", vec![[1, 5]], |g, x| g.l2_norm(x[0])),
    ]
}

/// `Σ op(x) ⊙ r` and, optionally, its gradient with respect to every input.
fn probe_op(op: OpFn, inputs: &[Tensor], r: Option<&Tensor>, grads: bool) -> Result<(f64, Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let out_value = g.value(out).clone();
    let r = match r {
        Some(r) => r.clone(),
        None => return Ok((0.0, out_value, Vec::new())),
    };
    let rv = g.constant(r);
    let weighted = g.mul(out, rv)?;
    let loss = g.sum(weighted);
    let value = g.value(loss).data()[0];
    if !grads {
        return Ok((value, out_value, Vec::new()));
    }
    let gr = g.backward(loss)?;
    let grads = vars.iter().zip(inputs).map(|(&v, t)| gr.get_or_zeros(v, t)).collect();
    Ok((value, out_value, grads))
}

/// Central finite differences of every op against its analytic gradient.
pub fn gradients_ops(cfg: &GradientCheck) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::Gradients.name());
    report.table.push(format!(
        "{} trials per op, h={:.0e}, relative error floor {:.0e}",
        cfg.trials, cfg.step, cfg.floor
    ));
    report.table.push(String::from("op                 max rel err"));
    let mut worst_all = 0.0f64;
    let mut failing = Vec::new();
    for (name, shapes, op) in op_cases() {
        let mut worst = 0.0f64;
        for trial in 0..cfg.trials {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((trial as u64) << 8));
            let mut inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| random_matrix(&mut rng, s[0], s[1], 1.0))
                .collect();
            if name == "sqrt" {
                inputs = inputs.iter().map(|t| t.map(|v| v.abs() + 0.5)).collect();
            }
            let (_, out, _) = probe_op(op, &inputs, None, false)?;
            let r = Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0));
            let (_, _, analytic) = probe_op(op, &inputs, Some(&r), true)?;
            for (i, input) in inputs.iter().enumerate() {
                for j in 0..input.numel() {
                    let mut plus = inputs.clone();
                    plus[i].data_mut()[j] += cfg.step;
                    let mut minus = inputs.clone();
                    minus[i].data_mut()[j] -= cfg.step;
                    let (fp, _, _) = probe_op(op, &plus, Some(&r), false)?;
                    let (fm, _, _) = probe_op(op, &minus, Some(&r), false)?;
                    let numeric = (fp - fm) / (2.0 * cfg.step);
                    worst = worst.max(relative_error(analytic[i].data()[j], numeric, cfg.floor));
                }
            }
        }
        report.table.push(format!("{name:<18} {worst:.2e}"));
        if !(worst < cfg.tolerance) {
            failing.push(name);
        }
        worst_all = worst_all.max(worst);
    }
    report.check(
        "per-op gradients",
        failing.is_empty(),
        format!(
            "max rel err {worst_all:.2e} (tolerance {:.0e}); failing: {failing:?}",
            cfg.tolerance
        ),
    );
    Ok(report)
}

fn gradient_model(seed: u64) -> Result<Model> {
    let cfg = Experiment::default().model;
    let cfg = ModelConfig {
        layers: 2,
        dim: 32,
        ..cfg
    };
    let init = InitSpec {
        classifier_std: 0.5,
        ..InitSpec::default()
    };
    Model::init(cfg, init, seed)
}

fn random_image(rng: &mut ChaCha8Rng, side: usize, channels: usize) -> Tensor {
    Tensor::from_fn(&[side, side, channels], |_| rng.random_range(0.0..1.0))
}

/// Target-stream (student) and target-to-source (teacher) logits of every pair,
/// drawing noise in the same order as `objective`.
fn batch_logits(
    model: &Model,
    batch: &[PairInput],
    options: &QuadOptions,
    noise: NoiseSpec,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let native = model
        .config
        .native_index()
        .ok_or(Error::Spec("native side not in scale set".into()))?;
    let mut rng = noise.rng();
    let (mut students, mut teachers) = (Vec::new(), Vec::new());
    for p in batch {
        let out = forward_quad(model, (&p.source, p.scale), (&p.target, native), options, &mut rng)?;
        students.push(model.params.classifier.target_logits(&out.quad.f_t)?.0);
        teachers.push(model.params.classifier.target_logits(&out.quad.f_t2s)?.0);
    }
    Ok((students, teachers))
}

fn set_coordinate(model: &mut Model, path: &str, index: usize, value: f64) {
    model.params.visit_mut(&mut |p, t| {
        if p == path {
            t.data_mut()[index] = value;
        }
    });
}

/// total_loss finite differences on random coordinates of a two-layer,
/// 32-dimensional model with noise on and every term weighted. The distillation
/// teacher is held at the unperturbed parameters.
pub fn gradients_total_loss(cfg: &GradientCheck) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::Gradients.name());
    let weights = LossWeights {
        w_style: 1.0,
        ..LossWeights::default()
    };
    let noise = NoiseSpec::new(0.1, cfg.seed);
    let options = QuadOptions {
        noise: Some(noise),
        noise_layers: NoiseLayers::All,
        ..QuadOptions::default()
    };
    let mut worst = (0.0f64, String::new());
    for m in 0..cfg.models {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000 + m as u64));
        let mut model = gradient_model(rng.next_u64())?;
        let ch = model.config.channels;
        let native = model.config.native_side;
        let scales = model.config.scales.clone();
        let batch: Vec<PairInput> = (0..2)
            .map(|i| {
                let scale = (m + i) % scales.len();
                PairInput {
                    source: random_image(&mut rng, scales.side(scale), ch),
                    scale,
                    label: rng.random_range(0..model.config.classes),
                    target: random_image(&mut rng, native, ch),
                    pseudo: rng.random_range(0..model.config.classes),
                }
            })
            .collect();
        let (_, analytic) = objective(&model, &batch, true, &weights, &options, &mut noise.rng())?;
        let teachers = batch_logits(&model, &batch, &options, noise)?.1;
        let without_dst = LossWeights { w_dst: 0.0, ..weights };
        let loss = |model: &Model| -> Result<f64> {
            let (r, _) = objective(model, &batch, true, &without_dst, &options, &mut noise.rng())?;
            let students = batch_logits(model, &batch, &options, noise)?.0;
            let mut dst = 0.0;
            for (s, t) in students.iter().zip(&teachers) {
                dst += distillation_directed(s, t, weights.tau_distill, weights.kl_direction)?;
            }
            Ok(r.total + weights.w_dst * dst / batch.len() as f64)
        };
        let mut tensors: Vec<(String, usize)> = Vec::new();
        model.params.visit(&mut |p, t| tensors.push((p, t.numel())));
        let mut analytic_by_path: Vec<(String, Tensor)> = Vec::new();
        analytic.visit(&mut |p, t| analytic_by_path.push((p, t.clone())));
        for _ in 0..cfg.coordinates {
            let (path, len) = tensors[rng.random_range(0..tensors.len())].clone();
            let j = rng.random_range(0..len);
            let mut original = 0.0;
            model.params.visit(&mut |p, t| {
                if p == path {
                    original = t.data()[j];
                }
            });
            set_coordinate(&mut model, &path, j, original + cfg.step);
            let fp = loss(&model)?;
            set_coordinate(&mut model, &path, j, original - cfg.step);
            let fm = loss(&model)?;
            set_coordinate(&mut model, &path, j, original);
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic_by_path
                .iter()
                .find(|(p, _)| *p == path)
                .map(|(_, t)| t.data()[j])
                .unwrap_or(0.0);
            let e = relative_error(a, numeric, cfg.floor);
            if e > worst.0 || worst.1.is_empty() {
                worst = (e, format!("{path}[{j}]"));
            }
        }
    }
    let trials = cfg.models * cfg.coordinates;
    report.table.push(format!(
        "total_loss            {:.2e} over {trials} coordinates ({} models, worst at {})",
        worst.0, cfg.models, worst.1
    ));
    report.check(
        "total_loss gradient",
        worst.0 < cfg.tolerance,
        format!(
            "max rel err {:.2e} over {trials} coordinates (tolerance {:.0e})",
            worst.0, cfg.tolerance
        ),
    );
    Ok(report)
}
