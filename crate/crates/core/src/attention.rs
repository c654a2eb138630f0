//! Multi-head attention with optional Gaussian noise on keys and values,
//! the hard patch-matching operator it generalises, and attention diagnostics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{kl_divergence, Graph, Tensor, Var};

/// Query/key/value projections shared by every attention wiring of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub heads: usize,
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            heads: self.heads,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
    }
}

/// Affine terms of a layer norm, each 1×D.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T = Tensor> {
    pub gain: T,
    pub bias: T,
}

impl<T> NormParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> NormParams<U> {
        NormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl NormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: Tensor::full(&[1, dim], 1.0),
            bias: Tensor::zeros(&[1, dim]),
        }
    }
}

/// Two-layer GELU feed-forward: `gelu(x·w1 + b1)·w2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T = Tensor> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> MlpParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> MlpParams<U> {
        MlpParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

/// Zero-mean Gaussian perturbation of keys and values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
    pub enabled: bool,
}

impl NoiseSpec {
    pub const OFF: NoiseSpec = NoiseSpec {
        sigma: 0.0,
        seed: 0,
        enabled: false,
    };

    pub fn new(sigma: f64, seed: u64) -> Self {
        Self {
            sigma,
            seed,
            enabled: true,
        }
    }

    /// True when a forward pass would actually draw noise.
    pub fn is_active(&self) -> bool {
        self.enabled && self.sigma > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::Parameter {
                name: "noise sigma",
                value: self.sigma,
            });
        }
        Ok(())
    }

    /// Generator seeded from `seed`; equal seeds give equal draws.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    pub fn disabled(self) -> Self {
        Self { enabled: false, ..self }
    }
}

/// Values recorded by one attention call on a graph.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// Aggregated heads, before any residual.
    pub out: Var,
    /// Query projection (never perturbed).
    pub queries: Var,
    /// heads × n_q × n_kv attention distributions.
    pub weights: Tensor,
}

fn gaussian(rows: usize, cols: usize, sigma: f64, rng: &mut dyn rand::RngCore) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

fn check_projection(op: &'static str, w: &Tensor, dim: usize) -> Result<()> {
    if w.shape() != [dim, dim] {
        return dim_err(op, w.shape(), &[dim, dim]);
    }
    Ok(())
}

/// Multi-head attention of `zq` against `zkv` recorded on `g`.
pub fn attend_on(
    g: &mut Graph,
    params: &AttentionParams<Var>,
    zq: Var,
    zkv: Var,
    noise: &NoiseSpec,
    rng: &mut dyn rand::RngCore,
) -> Result<AttentionTrace> {
    noise.validate()?;
    let dim = g.value(zq).cols();
    if g.value(zkv).cols() != dim {
        return dim_err("attend", g.value(zq).shape(), g.value(zkv).shape());
    }
    for w in [params.w_q, params.w_k, params.w_v] {
        check_projection("attend", g.value(w), dim)?;
    }
    let heads = params.heads;
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Parameter {
            name: "heads",
            value: heads as f64,
        });
    }
    let head_dim = dim / heads;
    let nq = g.value(zq).rows();
    let nkv = g.value(zkv).rows();

    let queries = g.matmul(zq, params.w_q)?;
    let mut keys = g.matmul(zkv, params.w_k)?;
    let mut values = g.matmul(zkv, params.w_v)?;
    if noise.is_active() {
        let eps_k = g.constant(gaussian(nkv, dim, noise.sigma, rng));
        let eps_v = g.constant(gaussian(nkv, dim, noise.sigma, rng));
        keys = g.add(keys, eps_k)?;
        values = g.add(values, eps_v)?;
    }

    let scale = 1.0 / libm::sqrt(head_dim as f64);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads * nq * nkv);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (queries, keys, values)
        } else {
            (
                g.slice_cols(queries, h * head_dim, head_dim)?,
                g.slice_cols(keys, h * head_dim, head_dim)?,
                g.slice_cols(values, h * head_dim, head_dim)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let alpha = g.softmax_rows(scores, 1.0)?;
        weights.extend_from_slice(g.value(alpha).data());
        outs.push(g.matmul(alpha, vh)?);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok(AttentionTrace {
        out,
        queries,
        weights: Tensor::new(&[heads, nq, nkv], weights)?,
    })
}

/// Attention output (before residual) and per-head weights for token matrices.
pub fn attend(
    params: &AttentionParams,
    z_q: &Tensor,
    z_kv: &Tensor,
    noise: &NoiseSpec,
    rng: &mut dyn rand::RngCore,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bound = params.map(&mut |t| g.constant(t.clone()));
    let zq = g.constant(z_q.clone());
    let zkv = g.constant(z_kv.clone());
    let trace = attend_on(&mut g, &bound, zq, zkv, noise, rng)?;
    Ok((g.value(trace.out).clone(), trace.weights))
}

/// Affine layer norm on a graph.
pub fn layer_norm_on(g: &mut Graph, norm: &NormParams<Var>, x: Var, eps: f64) -> Result<Var> {
    let n = g.layer_norm(x, eps)?;
    let n = g.mul_row(n, norm.gain)?;
    g.add_row(n, norm.bias)
}

pub fn mlp_on(g: &mut Graph, mlp: &MlpParams<Var>, x: Var) -> Result<Var> {
    let h = g.matmul(x, mlp.w1)?;
    let h = g.add_row(h, mlp.b1)?;
    let h = g.gelu(h);
    let o = g.matmul(h, mlp.w2)?;
    g.add_row(o, mlp.b2)
}

/// `h = residual + attn_out; h + MLP(norm(h))`.
pub fn residual_block_on(
    g: &mut Graph,
    residual: Var,
    attn_out: Var,
    mlp: &MlpParams<Var>,
    norm: &NormParams<Var>,
    eps: f64,
) -> Result<Var> {
    let h = g.add(residual, attn_out)?;
    let n = layer_norm_on(g, norm, h, eps)?;
    let m = mlp_on(g, mlp, n)?;
    g.add(h, m)
}

/// Residual update of the query-side tokens with an attention output.
pub fn residual_block(z_q: &Tensor, attn_out: &Tensor, mlp: &MlpParams, norm: &NormParams, eps: f64) -> Result<Tensor> {
    if z_q.shape() != attn_out.shape() {
        return dim_err("residual_block", z_q.shape(), attn_out.shape());
    }
    let mut g = Graph::new();
    let mlp = mlp.map(&mut |t| g.constant(t.clone()));
    let norm = norm.map(&mut |t| g.constant(t.clone()));
    let zq = g.constant(z_q.clone());
    let a = g.constant(attn_out.clone());
    let out = residual_block_on(&mut g, zq, a, &mlp, &norm, eps)?;
    Ok(g.value(out).clone())
}

const NORM_TOL: f64 = 1e-9;

fn check_unit_rows(which: &'static str, t: &Tensor) -> Result<()> {
    if !t.is_matrix() {
        return dim_err("style matching", t.shape(), &[]);
    }
    for r in 0..t.rows() {
        let norm = libm::sqrt(t.row(r).iter().map(|v| v * v).sum());
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Normalization { which, row: r, norm });
        }
    }
    Ok(())
}

fn check_patch_pair(content: &Tensor, style: &Tensor) -> Result<()> {
    check_unit_rows("content", content)?;
    check_unit_rows("style", style)?;
    if content.cols() != style.cols() {
        return dim_err("style matching", content.shape(), style.shape());
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Replaces every content patch with its most similar style patch (cosine similarity,
/// ties to the lowest index).
pub fn style_swap_hard(content: &Tensor, style: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    check_patch_pair(content, style)?;
    let d = content.cols();
    let mut indices = Vec::with_capacity(content.rows());
    let mut matched = Vec::with_capacity(content.rows() * d);
    for i in 0..content.rows() {
        let c = content.row(i);
        let mut best = 0;
        let mut best_sim = dot(c, style.row(0));
        for j in 1..style.rows() {
            let sim = dot(c, style.row(j));
            if sim > best_sim {
                best = j;
                best_sim = sim;
            }
        }
        indices.push(best);
        matched.extend_from_slice(style.row(best));
    }
    Ok((Tensor::new(&[content.rows(), d], matched)?, indices))
}

/// Convex combination of style rows weighted by `softmax(⟨content_i, style_j⟩ / τ)`.
pub fn soft_style_attention(content: &Tensor, style: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter {
            name: "temperature",
            value: temperature,
        });
    }
    check_patch_pair(content, style)?;
    let mut g = Graph::new();
    let c = g.constant(content.clone());
    let s = g.constant(style.clone());
    let sims = g.matmul_nt(c, s)?;
    let alpha = g.softmax_rows(sims, temperature)?;
    let out = g.matmul(alpha, s)?;
    Ok(g.value(out).clone())
}

/// Per-token KL between attention rows computed with queries from `z` and from
/// `z_alt_query`, keys and values fixed to `z`. Heads are averaged.
pub fn attention_divergence(params: &AttentionParams, z: &Tensor, z_alt_query: &Tensor) -> Result<Vec<f64>> {
    if z.shape() != z_alt_query.shape() {
        return dim_err("attention_divergence", z.shape(), z_alt_query.shape());
    }
    let mut rng = NoiseSpec::OFF.rng();
    let (_, self_w) = attend(params, z, z, &NoiseSpec::OFF, &mut rng)?;
    let (_, alt_w) = attend(params, z_alt_query, z, &NoiseSpec::OFF, &mut rng)?;
    divergence_per_query(&self_w, &alt_w)
}

/// Head-averaged KL(a_i ‖ b_i) for each query row of two heads×n×m weight tensors.
pub fn divergence_per_query(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return dim_err("divergence_per_query", a.shape(), b.shape());
    }
    let (heads, n, m) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut out = vec![0.0; n];
    for h in 0..heads {
        for (i, o) in out.iter_mut().enumerate() {
            let off = (h * n + i) * m;
            *o += kl_divergence(&a.data()[off..off + m], &b.data()[off..off + m])? / heads as f64;
        }
    }
    Ok(out)
}

/// Draws an `n × d` matrix with i.i.d. N(0, std²) entries.
pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    gaussian(rows, cols, std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(dim: usize, heads: usize, seed: u64) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionParams {
            w_q: random_matrix(&mut rng, dim, dim, 0.5),
            w_k: random_matrix(&mut rng, dim, dim, 0.5),
            w_v: random_matrix(&mut rng, dim, dim, 0.5),
            heads,
        }
    }

    fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        let mut t = random_matrix(rng, rows, cols, 1.0);
        for r in t.data_mut().chunks_mut(cols) {
            let n = libm::sqrt(r.iter().map(|v| v * v).sum());
            r.iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    #[test]
    fn single_token_returns_its_value_row() {
        let p = params(8, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random_matrix(&mut rng, 1, 8, 1.0);
        let (out, w) = attend(&p, &z, &z, &NoiseSpec::OFF, &mut rng).unwrap();
        let v = z.matmul(&p.w_v).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
        assert!(w.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_sigma_matches_disabled_bitwise() {
        let p = params(8, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zq = random_matrix(&mut rng, 4, 8, 1.0);
        let zkv = random_matrix(&mut rng, 6, 8, 1.0);
        let zero = NoiseSpec::new(0.0, 9);
        let (a, wa) = attend(&p, &zq, &zkv, &zero, &mut zero.rng()).unwrap();
        let (b, wb) = attend(&p, &zq, &zkv, &NoiseSpec::OFF, &mut zero.rng()).unwrap();
        assert!(a.bit_eq(&b));
        assert!(wa.bit_eq(&wb));
    }

    #[test]
    fn cross_attention_is_weighted_sum_of_values() {
        let (dim, heads) = (8, 2);
        let p = params(dim, heads, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zq = random_matrix(&mut rng, 4, dim, 1.0);
        let zkv = random_matrix(&mut rng, 6, dim, 1.0);
        let (out, w) = attend(&p, &zq, &zkv, &NoiseSpec::OFF, &mut rng).unwrap();
        let v = zkv.matmul(&p.w_v).unwrap();
        let hd = dim / heads;
        for h in 0..heads {
            for i in 0..4 {
                for c in 0..hd {
                    let mut s = 0.0;
                    for j in 0..6 {
                        s += w.data()[(h * 4 + i) * 6 + j] * v.at(j, h * hd + c);
                    }
                    assert!((out.at(i, h * hd + c) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_noise() {
        let p = params(8, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random_matrix(&mut rng, 5, 8, 1.0);
        let noise = NoiseSpec::new(0.1, 42);
        let (a, _) = attend(&p, &z, &z, &noise, &mut noise.rng()).unwrap();
        let (b, _) = attend(&p, &z, &z, &noise, &mut noise.rng()).unwrap();
        let (c, _) = attend(&p, &z, &z, &NoiseSpec::OFF, &mut noise.rng()).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn negative_sigma_and_dim_mismatch() {
        let p = params(8, 4, 1);
        let z = Tensor::zeros(&[3, 8]);
        let bad = NoiseSpec::new(-0.1, 0);
        assert!(matches!(
            attend(&p, &z, &z, &bad, &mut bad.rng()),
            Err(Error::Parameter { .. })
        ));
        let z6 = Tensor::zeros(&[3, 6]);
        assert!(matches!(
            attend(&p, &z, &z6, &NoiseSpec::OFF, &mut bad.rng()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn residual_with_zero_branches_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random_matrix(&mut rng, 3, 4, 1.0);
        let mlp = MlpParams {
            w1: random_matrix(&mut rng, 4, 6, 1.0),
            b1: random_matrix(&mut rng, 1, 6, 1.0),
            w2: Tensor::zeros(&[6, 4]),
            b2: Tensor::zeros(&[1, 4]),
        };
        let out = residual_block(&z, &Tensor::zeros(&[3, 4]), &mlp, &NormParams::identity(4), 1e-6).unwrap();
        assert!(out.bit_eq(&z));
    }

    #[test]
    fn residual_zero_everything() {
        let mlp = MlpParams {
            w1: Tensor::zeros(&[2, 3]),
            b1: Tensor::zeros(&[1, 3]),
            w2: Tensor::zeros(&[3, 2]),
            b2: Tensor::zeros(&[1, 2]),
        };
        let norm = NormParams {
            gain: Tensor::zeros(&[1, 2]),
            bias: Tensor::zeros(&[1, 2]),
        };
        let z = Tensor::zeros(&[2, 2]);
        let out = residual_block(&z, &z, &mlp, &norm, 1e-6).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_hand_computed() {
        // two tokens, D = 2, hidden = 1, identity norm
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![0.5, 0.5], vec![1.0, -1.0]]).unwrap();
        let mlp = MlpParams {
            w1: Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            b1: Tensor::row_vector(vec![0.0]),
            w2: Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap(),
            b2: Tensor::row_vector(vec![0.0, 1.0]),
        };
        let eps = 1e-12;
        let out = residual_block(&z, &a, &mlp, &NormParams::identity(2), eps).unwrap();
        // h = [[1.5, 0.5], [1, 1]]; norm rows: [1, -1] and [0, 0]
        // hidden = gelu(first coordinate): gelu(1) = 0.841344746..., gelu(0) = 0
        let gelu1 = 0.841_344_746_068_542_9;
        let expected = [1.5 + 2.0 * gelu1, 0.5 + 1.0, 1.0, 2.0];
        for (o, e) in out.data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-10, "{o} vs {e}");
        }
    }

    #[test]
    fn style_swap_self_match_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let style = unit_rows(&mut rng, 5, 6);
        let content = style.slice_rows(3, 1).unwrap();
        let (m, idx) = style_swap_hard(&content, &style).unwrap();
        assert_eq!(idx, vec![3]);
        assert!(m.bit_eq(&content));

        let basis = Tensor::eye(4);
        let perm = [2usize, 0, 3, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| basis.row(p).to_vec()).collect();
        let style = Tensor::from_rows(&rows).unwrap();
        let (_, idx) = style_swap_hard(&basis, &style).unwrap();
        for (i, &j) in idx.iter().enumerate() {
            assert_eq!(perm[j], i);
        }
    }

    #[test]
    fn style_swap_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let content = unit_rows(&mut rng, 9, 8);
        let style = unit_rows(&mut rng, 4, 8);
        let (_, idx) = style_swap_hard(&content, &style).unwrap();
        for i in 0..9 {
            let sims: Vec<f64> = (0..4).map(|j| dot(content.row(i), style.row(j))).collect();
            let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(sims[idx[i]], best);
        }
    }

    #[test]
    fn unnormalized_rows_are_reported() {
        let style = Tensor::eye(3);
        let content = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(
            style_swap_hard(&content, &style).unwrap_err(),
            Error::Normalization {
                which: "content",
                row: 1,
                norm: 2.0
            }
        );
    }

    #[test]
    fn soft_attention_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let content = unit_rows(&mut rng, 9, 8);
        let style = unit_rows(&mut rng, 4, 8);
        let hot = soft_style_attention(&content, &style, 1e9).unwrap();
        let mut mean = vec![0.0; 8];
        for j in 0..4 {
            for (m, v) in mean.iter_mut().zip(style.row(j)) {
                *m += v / 4.0;
            }
        }
        for i in 0..9 {
            for (a, b) in hot.row(i).iter().zip(&mean) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let single = style.slice_rows(0, 1).unwrap();
        let one = soft_style_attention(&content, &single, 0.3).unwrap();
        for i in 0..9 {
            for (a, b) in one.row(i).iter().zip(single.row(0)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert!(soft_style_attention(&content, &style, 0.0).is_err());
    }

    #[test]
    fn cold_soft_attention_equals_hard_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let content = unit_rows(&mut rng, 9, 8);
        let style = unit_rows(&mut rng, 4, 8);
        let (hard, _) = style_swap_hard(&content, &style).unwrap();
        let soft = soft_style_attention(&content, &style, 1e-4).unwrap();
        assert!(soft.max_abs_diff(&hard) < 1e-6);
    }

    #[test]
    fn divergence_zero_for_same_query_and_positive_under_perturbation() {
        let p = params(8, 2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z = random_matrix(&mut rng, 5, 8, 1.0);
        assert!(attention_divergence(&p, &z, &z).unwrap().iter().all(|&v| v == 0.0));
        let alt = z.add(&random_matrix(&mut rng, 5, 8, 3.0)).unwrap();
        assert!(attention_divergence(&p, &z, &alt).unwrap().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn divergence_matches_two_forward_composition() {
        let p = params(8, 2, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let z = random_matrix(&mut rng, 5, 8, 1.0);
        let alt = random_matrix(&mut rng, 5, 8, 1.0);
        let got = attention_divergence(&p, &z, &alt).unwrap();
        let (_, ws) = attend(&p, &z, &z, &NoiseSpec::OFF, &mut rng).unwrap();
        let (_, wa) = attend(&p, &alt, &z, &NoiseSpec::OFF, &mut rng).unwrap();
        for i in 0..5 {
            let mut expected = 0.0;
            for h in 0..2 {
                let off = (h * 5 + i) * 5;
                let mut kl = 0.0;
                for j in 0..5 {
                    let (a, b) = (ws.data()[off + j], wa.data()[off + j]);
                    kl += a * libm::log(a / b);
                }
                expected += kl / 2.0;
            }
            assert!((got[i] - expected).abs() < 1e-12);
        }
    }
}
