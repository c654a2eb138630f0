//! Dynamic reverse-mode tape.
//!
//! Every operation evaluates eagerly and records its inputs; `backward` walks
//! the tape once in reverse. Values that do not depend on a leaf are not
//! tracked and receive no gradient, which is also how stop-gradient works
//! (`detach` re-enters a value as a constant).

use alloc::vec;
use alloc::vec::Vec;

use super::stats::{log_softmax_in_place, softmax_in_place};
use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax {
        x: Var,
        inv_temp: f64,
    },
    LogSoftmax {
        x: Var,
        inv_temp: f64,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sqrt(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

/// Recorded forward pass. Owned by a single forward/backward cycle.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every tracked node that reached it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the root.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        if !t.is_matrix() {
            return dim_err(op, t.shape(), &[]);
        }
        Ok((t.rows(), t.cols()))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return dim_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, tracked))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_nt", a)?;
        let (n, k2) = self.matrix("matmul_nt", b)?;
        if k != k2 {
            return dim_err("matmul_nt", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Op::MatMulNt(a, b), value, tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(Op::Transpose(a), value, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, tracked))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (m, n) = self.matrix(op, a)?;
        let (r, n2) = self.matrix(op, row)?;
        if r != 1 || n != n2 {
            return dim_err(op, self.shape(a), self.shape(row));
        }
        let rv = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(rv) {
                *o = f(*o, b);
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `a + row` with `row` (1×n) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast("add_row", a, row, |x, b| x + b)?;
        let tracked = self.tracked(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), value, tracked))
    }

    /// `a * row` with `row` (1×n) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast("mul_row", a, row, |x, b| x * b)?;
        let tracked = self.tracked(&[a, row]);
        Ok(self.push(Op::MulRow(a, row), value, tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let tracked = self.tracked(&[a]);
        self.push(Op::Scale(a, c), value, tracked)
    }

    fn check_temperature(temperature: f64) -> Result<()> {
        if temperature > 0.0 {
            Ok(())
        } else {
            Err(Error::Parameter {
                name: "temperature",
                value: temperature,
            })
        }
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let (_, n) = self.matrix("softmax_rows", x)?;
        let inv_temp = 1.0 / temperature;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            softmax_in_place(row, inv_temp);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::Softmax { x, inv_temp }, value, tracked))
    }

    pub fn log_softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let (_, n) = self.matrix("log_softmax_rows", x)?;
        let inv_temp = 1.0 / temperature;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            log_softmax_in_place(row, inv_temp);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::LogSoftmax { x, inv_temp }, value, tracked))
    }

    /// Per-row standardisation `(x − μ) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix("layer_norm", x)?;
        let mut value = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(m);
        for row in value.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::LayerNorm { x, inv_std }, value, tracked))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * gelu_cdf(v));
        let tracked = self.tracked(&[x]);
        self.push(Op::Gelu(x), value, tracked)
    }

    /// Elementwise square root; the gradient at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Parameter {
                name: "sqrt argument",
                value: bad,
            });
        }
        let value = self.value(x).map(libm::sqrt);
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::Sqrt(x), value, tracked))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix("slice_cols", x)?;
        if len == 0 || start + len > n {
            return dim_err("slice_cols", self.shape(x), &[start, len]);
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let value = Tensor::new(&[m, len], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::SliceCols { x, start }, value, tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols parts"))?;
        let (m, _) = self.matrix("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.matrix("concat_cols", p)?;
            if pm != m {
                return dim_err("concat_cols", self.shape(first), self.shape(p));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(&[m, total], out)?;
        let tracked = self.tracked(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, tracked))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::SliceRows { x, start }, value, tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows parts"))?;
        let (_, n) = self.matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.matrix("concat_rows", p)?;
            if pn != n {
                return dim_err("concat_rows", self.shape(first), self.shape(p));
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, n], out)?;
        let tracked = self.tracked(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, tracked))
    }

    /// Picks flat elements of `x` into a 1×len row.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if indices.is_empty() {
            return Err(Error::Empty("gather indices"));
        }
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(*src.get(i).ok_or(Error::IndexOutOfRange {
                what: "gather",
                index: i,
                len: src.len(),
            })?);
        }
        let value = Tensor::row_vector(out);
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            value,
            tracked,
        ))
    }

    /// Sum of all elements as a 1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(&[x]);
        self.push(Op::Sum(x), value, tracked)
    }

    /// Column means of an m×n matrix as a 1×n row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix("mean_rows", x)?;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, &v) in out.iter_mut().zip(self.value(x).row(r)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        let value = Tensor::row_vector(out);
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::MeanRows(x), value, tracked))
    }

    /// `−log softmax(logits)[target]` for a 1×C logit row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (m, c) = self.matrix("cross_entropy", logits)?;
        if m != 1 {
            return dim_err("cross_entropy", self.shape(logits), &[1, c]);
        }
        if target >= c {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: target,
                len: c,
            });
        }
        let mut logp = self.value(logits).data().to_vec();
        log_softmax_in_place(&mut logp, 1.0);
        let probs = logp.iter().map(|&v| libm::exp(v)).collect();
        let value = Tensor::scalar(-logp[target]);
        let tracked = self.tracked(&[logits]);
        Ok(self.push(Op::CrossEntropy { logits, target, probs }, value, tracked))
    }

    /// Euclidean norm of all elements, 1×1.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        let s = self.sum(sq);
        self.sqrt(s)
    }

    /// Gradients of the scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape(), g)?);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.is_tracked(*a) {
                        let ga = self.acc(&mut grads, *a);
                        matmul_nt_into(&g, bv.data(), ga, m, n, k);
                    }
                    if self.is_tracked(*b) {
                        let gb = self.acc(&mut grads, *b);
                        matmul_tn_into(av.data(), &g, gb, m, k, n);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    if self.is_tracked(*a) {
                        let ga = self.acc(&mut grads, *a);
                        matmul_into(&g, bv.data(), ga, m, n, k);
                    }
                    if self.is_tracked(*b) {
                        let gb = self.acc(&mut grads, *b);
                        matmul_tn_into(&g, av.data(), gb, m, n, k);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let ga = self.acc(&mut grads, *a);
                    // node is m×n, input is n×m
                    for r in 0..m {
                        for c in 0..n {
                            ga[c * m + r] += g[r * n + c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                        if self.is_tracked(v) {
                            add_scaled(self.acc(&mut grads, v), &g, sign);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                        if self.is_tracked(v) {
                            add_scaled(self.acc(&mut grads, v), &g, sign);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.is_tracked(*a) {
                        let ga = self.acc(&mut grads, *a);
                        for ((o, &gi), &bi) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += gi * bi;
                        }
                    }
                    if self.is_tracked(*b) {
                        let gb = self.acc(&mut grads, *b);
                        for ((o, &gi), &ai) in gb.iter_mut().zip(&g).zip(av) {
                            *o += gi * ai;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    let n = node.value.cols();
                    if self.is_tracked(*a) {
                        add_scaled(self.acc(&mut grads, *a), &g, 1.0);
                    }
                    if self.is_tracked(*row) {
                        let gr = self.acc(&mut grads, *row);
                        for chunk in g.chunks(n) {
                            add_scaled(gr, chunk, 1.0);
                        }
                    }
                }
                Op::MulRow(a, row) => {
                    let n = node.value.cols();
                    let rv = self.value(*row).data();
                    let av = self.value(*a).data();
                    if self.is_tracked(*a) {
                        let ga = self.acc(&mut grads, *a);
                        for (gc, oc) in g.chunks(n).zip(ga.chunks_mut(n)) {
                            for ((o, &gi), &ri) in oc.iter_mut().zip(gc).zip(rv) {
                                *o += gi * ri;
                            }
                        }
                    }
                    if self.is_tracked(*row) {
                        let gr = self.acc(&mut grads, *row);
                        for (gc, ac) in g.chunks(n).zip(av.chunks(n)) {
                            for ((o, &gi), &ai) in gr.iter_mut().zip(gc).zip(ac) {
                                *o += gi * ai;
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    add_scaled(self.acc(&mut grads, *a), &g, *c);
                }
                Op::Softmax { x, inv_temp } => {
                    let n = node.value.cols();
                    let y = node.value.data();
                    let gx = self.acc(&mut grads, *x);
                    for ((yc, gc), oc) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
                        for ((o, &yi), &gi) in oc.iter_mut().zip(yc).zip(gc) {
                            *o += inv_temp * yi * (gi - dot);
                        }
                    }
                }
                Op::LogSoftmax { x, inv_temp } => {
                    let n = node.value.cols();
                    let y = node.value.data();
                    let gx = self.acc(&mut grads, *x);
                    for ((yc, gc), oc) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let total: f64 = gc.iter().sum();
                        for ((o, &yi), &gi) in oc.iter_mut().zip(yc).zip(gc) {
                            *o += inv_temp * (gi - libm::exp(yi) * total);
                        }
                    }
                }
                Op::LayerNorm { x, inv_std } => {
                    let n = node.value.cols();
                    let y = node.value.data();
                    let gx = self.acc(&mut grads, *x);
                    for (((yc, gc), oc), &is) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)).zip(inv_std) {
                        let mean_g = gc.iter().sum::<f64>() / n as f64;
                        let mean_gy = gc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, &yi), &gi) in oc.iter_mut().zip(yc).zip(gc) {
                            *o += is * (gi - mean_g - yi * mean_gy);
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let gx = self.acc(&mut grads, *x);
                    for ((o, &gi), &xi) in gx.iter_mut().zip(&g).zip(xv) {
                        *o += gi * (gelu_cdf(xi) + xi * gelu_pdf(xi));
                    }
                }
                Op::Sqrt(x) => {
                    let y = node.value.data();
                    let gx = self.acc(&mut grads, *x);
                    for ((o, &gi), &yi) in gx.iter_mut().zip(&g).zip(y) {
                        if yi > 0.0 {
                            *o += gi * 0.5 / yi;
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let len = node.value.cols();
                    let n = self.value(*x).cols();
                    let gx = self.acc(&mut grads, *x);
                    for (r, gc) in g.chunks(len).enumerate() {
                        add_scaled(&mut gx[r * n + start..r * n + start + len], gc, 1.0);
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pn = self.value(p).cols();
                        if self.is_tracked(p) {
                            let gp = self.acc(&mut grads, p);
                            for (r, oc) in gp.chunks_mut(pn).enumerate() {
                                add_scaled(oc, &g[r * total + offset..r * total + offset + pn], 1.0);
                            }
                        }
                        offset += pn;
                    }
                }
                Op::SliceRows { x, start } => {
                    let n = node.value.cols();
                    let gx = self.acc(&mut grads, *x);
                    add_scaled(&mut gx[start * n..start * n + g.len()], &g, 1.0);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        if self.is_tracked(p) {
                            add_scaled(self.acc(&mut grads, p), &g[offset..offset + len], 1.0);
                        }
                        offset += len;
                    }
                }
                Op::Gather { x, indices } => {
                    let gx = self.acc(&mut grads, *x);
                    for (&i, &gi) in indices.iter().zip(&g) {
                        gx[i] += gi;
                    }
                }
                Op::Sum(x) => {
                    let gx = self.acc(&mut grads, *x);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
                Op::MeanRows(x) => {
                    let m = self.value(*x).rows();
                    let n = node.value.cols();
                    let gx = self.acc(&mut grads, *x);
                    for oc in gx.chunks_mut(n) {
                        add_scaled(oc, &g, 1.0 / m as f64);
                    }
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let gl = self.acc(&mut grads, *logits);
                    for (j, (o, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let y = if j == *target { 1.0 } else { 0.0 };
                        *o += g[0] * (p - y);
                    }
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    /// Mutable gradient buffer for `v`, allocated on first touch.
    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}
