//! Domain-adaptive transformer.
//!
//! One pre-norm patch-token backbone is evaluated under four attention wirings
//! per source/target pair: source self-attention, source queries against target
//! keys/values, target queries against source keys/values, and target
//! self-attention. Layer `l` of the source-to-target stream takes its queries
//! and its residual from layer `l-1` of the source self-attention stream and
//! its keys/values from layer `l-1` of the target self-attention stream; the
//! target-to-source stream mirrors it. The cross features are read from the
//! last cross layer.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend_on, layer_norm_on, random_matrix, residual_block_on, AttentionParams, MlpParams, NoiseSpec, NormParams,
};
use crate::csm::{ScaleSet, SubCenterClassifier};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{matmul, Gradients, Graph, Tensor, Var};
use crate::resample::resize_bilinear;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub patch: usize,
    pub channels: usize,
    pub classes: usize,
    /// One positional bank and one classifier sub-center per side.
    pub scales: ScaleSet,
    /// Resolution at which target images are embedded (must be in `scales`).
    pub native_side: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("patch", self.patch),
            ("channels", self.channels),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Spec(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            )));
        }
        if self.native_index().is_none() {
            return Err(Error::Spec(format!(
                "native side {} is not in the scale set {:?}",
                self.native_side,
                self.scales.sides()
            )));
        }
        Ok(())
    }

    pub fn native_index(&self) -> Option<usize> {
        self.scales.index_of(self.native_side)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn tokens_for_side(&self, side: usize) -> usize {
        let g = side / self.patch;
        g * g + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = Tensor> {
    pub norm1: NormParams<T>,
    pub attn: AttentionParams<T>,
    pub norm2: NormParams<T>,
    pub mlp: MlpParams<T>,
}

impl<T> LayerParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            norm1: self.norm1.map(f),
            attn: self.attn.map(f),
            norm2: self.norm2.map(f),
            mlp: self.mlp.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.norm2.visit_mut(&format!("{prefix}.norm2"), f);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
    }
}

/// The single parameter set shared by all four streams.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T = Tensor> {
    /// (P²·C) × D, no bias.
    pub patch_projection: T,
    /// 1 × D.
    pub cls_embedding: T,
    /// Bank `k` is (N_k + 1) × D for scale `k`.
    pub pos_embeddings: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: NormParams<T>,
}

impl<T> BackboneParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> BackboneParams<U> {
        BackboneParams {
            patch_projection: f(&self.patch_projection),
            cls_embedding: f(&self.cls_embedding),
            pos_embeddings: self.pos_embeddings.iter().map(&mut *f).collect(),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            final_norm: self.final_norm.map(f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("backbone.patch_projection".into(), &self.patch_projection);
        f("backbone.cls_embedding".into(), &self.cls_embedding);
        for (k, p) in self.pos_embeddings.iter().enumerate() {
            f(format!("backbone.pos_embedding.{k}"), p);
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("backbone.layers.{l}"), f);
        }
        self.final_norm.visit("backbone.final_norm", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("backbone.patch_projection".into(), &mut self.patch_projection);
        f("backbone.cls_embedding".into(), &mut self.cls_embedding);
        for (k, p) in self.pos_embeddings.iter_mut().enumerate() {
            f(format!("backbone.pos_embedding.{k}"), p);
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("backbone.layers.{l}"), f);
        }
        self.final_norm.visit_mut("backbone.final_norm", f);
    }
}

/// Backbone plus sub-center classifier: everything that is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct DacsmParams<T = Tensor> {
    pub backbone: BackboneParams<T>,
    pub classifier: SubCenterClassifier<T>,
}

impl<T> DacsmParams<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.backbone.visit(f);
        f("classifier.weights".into(), &self.classifier.weights);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.backbone.visit_mut(f);
        f("classifier.weights".into(), &mut self.classifier.weights);
    }
}

impl DacsmParams {
    /// Puts every parameter on `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DacsmParams<Var> {
        let mut put = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let backbone = self.backbone.map(&mut put);
        let c = &self.classifier;
        let flat = Tensor::new(&[c.classes * c.subcenters, c.dim()], c.weights.data().to_vec())
            .expect("classifier weights are non-empty");
        let weights = put(&flat);
        DacsmParams {
            backbone,
            classifier: SubCenterClassifier {
                weights,
                classes: c.classes,
                subcenters: c.subcenters,
            },
        }
    }

    /// Gradients shaped like `self`; parameters that did not reach the root get zeros.
    pub fn gradients(&self, bound: &DacsmParams<Var>, grads: &Gradients) -> DacsmParams {
        let mut vars = Vec::new();
        bound.visit(&mut |_, v| vars.push(*v));
        let mut out = self.clone();
        let mut i = 0;
        out.visit_mut(&mut |_, t| {
            let g = grads.get_or_zeros(vars[i], t);
            *t = Tensor::new(t.shape(), g.into_data()).expect("gradient shape matches parameter");
            i += 1;
        });
        out
    }

    pub fn paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |p, _| out.push(p));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn bit_eq(&self, other: &DacsmParams) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bit_eq(y))
    }
}

/// Instrumentation of the expensive forward stages.
#[derive(Debug, Default)]
pub struct OpCounters {
    patch_projections: AtomicU64,
    backbone_forwards: AtomicU64,
}

impl OpCounters {
    pub fn patch_projections(&self) -> u64 {
        self.patch_projections.load(Ordering::Relaxed)
    }

    /// Token sequences pushed through the transformer layers.
    pub fn backbone_forwards(&self) -> u64 {
        self.backbone_forwards.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.patch_projections.store(0, Ordering::Relaxed);
        self.backbone_forwards.store(0, Ordering::Relaxed);
    }
}

/// Parameters, their architecture and forward instrumentation.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: DacsmParams,
    pub counters: OpCounters,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            counters: OpCounters::default(),
        }
    }
}

/// Initial weight scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub embedding_std: f64,
    pub classifier_std: f64,
    /// Spread of the per-scale copies of the base classifier.
    pub subcenter_jitter: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            embedding_std: 0.1,
            classifier_std: 0.1,
            subcenter_jitter: 0.01,
        }
    }
}

impl Model {
    pub fn init(config: ModelConfig, init: InitSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let fan = |n: usize| 1.0 / libm::sqrt(n as f64);
        let patch_projection = random_matrix(&mut rng, config.patch_dim(), d, fan(config.patch_dim()));
        let cls_embedding = random_matrix(&mut rng, 1, d, init.embedding_std);

        let native = config.native_index().expect("validated");
        let base_grid = config.native_side / config.patch;
        let base = random_matrix(&mut rng, base_grid * base_grid + 1, d, init.embedding_std);
        let mut pos_embeddings = Vec::with_capacity(config.scales.len());
        for k in 0..config.scales.len() {
            if k == native {
                pos_embeddings.push(base.clone());
            } else {
                let grid = config.scales.side(k) / config.patch;
                pos_embeddings.push(interpolate_pos_embedding(&base, grid)?);
            }
        }

        let layers = (0..config.layers)
            .map(|_| LayerParams {
                norm1: NormParams::identity(d),
                attn: AttentionParams {
                    w_q: random_matrix(&mut rng, d, d, fan(d)),
                    w_k: random_matrix(&mut rng, d, d, fan(d)),
                    w_v: random_matrix(&mut rng, d, d, fan(d)),
                    heads: config.heads,
                },
                norm2: NormParams::identity(d),
                mlp: MlpParams {
                    w1: random_matrix(&mut rng, d, config.mlp_hidden, fan(d)),
                    b1: Tensor::zeros(&[1, config.mlp_hidden]),
                    w2: random_matrix(&mut rng, config.mlp_hidden, d, fan(config.mlp_hidden)),
                    b2: Tensor::zeros(&[1, d]),
                },
            })
            .collect();

        let (c, kk) = (config.classes, config.scales.len());
        let base_cls = random_matrix(&mut rng, c, d, init.classifier_std);
        let mut w = Vec::with_capacity(c * kk * d);
        for class in 0..c {
            for _ in 0..kk {
                for &b in base_cls.row(class) {
                    let jitter: f64 = rng.sample(rand_distr::StandardNormal);
                    w.push(b + init.subcenter_jitter * jitter);
                }
            }
        }
        let classifier = SubCenterClassifier::new(Tensor::new(&[c, kk, d], w)?)?;

        Ok(Self {
            params: DacsmParams {
                backbone: BackboneParams {
                    patch_projection,
                    cls_embedding,
                    pos_embeddings,
                    layers,
                    final_norm: NormParams::identity(d),
                },
                classifier,
            },
            config,
            counters: OpCounters::default(),
        })
    }

    pub fn from_params(config: ModelConfig, params: DacsmParams) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Self {
            config,
            params,
            counters: OpCounters::default(),
        })
    }

    pub fn ctx(&self) -> Ctx<'_> {
        Ctx {
            config: &self.config,
            counters: &self.counters,
        }
    }
}

/// Shape consistency between an architecture and a parameter set.
pub fn check_params(config: &ModelConfig, params: &DacsmParams) -> Result<()> {
    let d = config.dim;
    let b = &params.backbone;
    let expect = |what: &'static str, t: &Tensor, shape: &[usize]| -> Result<()> {
        if t.shape() != shape {
            return dim_err(what, t.shape(), shape);
        }
        Ok(())
    };
    expect("patch_projection", &b.patch_projection, &[config.patch_dim(), d])?;
    expect("cls_embedding", &b.cls_embedding, &[1, d])?;
    if b.pos_embeddings.len() != config.scales.len() {
        return dim_err("pos_embeddings", &[b.pos_embeddings.len()], &[config.scales.len()]);
    }
    for (k, p) in b.pos_embeddings.iter().enumerate() {
        expect("pos_embedding", p, &[config.tokens_for_side(config.scales.side(k)), d])?;
    }
    if b.layers.len() != config.layers {
        return dim_err("layers", &[b.layers.len()], &[config.layers]);
    }
    for l in &b.layers {
        for w in [&l.attn.w_q, &l.attn.w_k, &l.attn.w_v] {
            expect("attention projection", w, &[d, d])?;
        }
        if l.attn.heads != config.heads {
            return dim_err("heads", &[l.attn.heads], &[config.heads]);
        }
        for n in [&l.norm1, &l.norm2] {
            expect("norm gain", &n.gain, &[1, d])?;
            expect("norm bias", &n.bias, &[1, d])?;
        }
        expect("mlp.w1", &l.mlp.w1, &[d, config.mlp_hidden])?;
        expect("mlp.b1", &l.mlp.b1, &[1, config.mlp_hidden])?;
        expect("mlp.w2", &l.mlp.w2, &[config.mlp_hidden, d])?;
        expect("mlp.b2", &l.mlp.b2, &[1, d])?;
    }
    expect("final_norm gain", &b.final_norm.gain, &[1, d])?;
    expect("final_norm bias", &b.final_norm.bias, &[1, d])?;
    expect(
        "classifier",
        &params.classifier.weights,
        &[config.classes, config.scales.len(), d],
    )?;
    Ok(())
}

/// Architecture plus counters threaded through graph-level forwards.
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub config: &'a ModelConfig,
    pub counters: &'a OpCounters,
}

/// Patch tokens with the CLS token in row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub scale_index: usize,
    pub source_image_shape: [usize; 3],
}

/// Flattens an H×W×C image into N × (P²·C) patch rows, grid row-major,
/// each patch ordered (row, column, channel).
pub fn extract_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.shape().len() != 3 {
        return dim_err("extract_patches", image.shape(), &[]);
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Tiling {
            height: h,
            width: w,
            patch,
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * w + gx * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, patch * patch * c], out)
}

/// Embeds an image as tokens on `g`. Counts one patch projection.
pub fn tokenize_on(
    g: &mut Graph,
    ctx: Ctx<'_>,
    params: &BackboneParams<Var>,
    image: &Tensor,
    scale_index: usize,
) -> Result<Var> {
    let patches = extract_patches(image, ctx.config.patch)?;
    let bank = *params.pos_embeddings.get(scale_index).ok_or(Error::IndexOutOfRange {
        what: "scale",
        index: scale_index,
        len: params.pos_embeddings.len(),
    })?;
    let tokens = patches.rows() + 1;
    let bank_rows = g.value(bank).rows();
    if bank_rows != tokens {
        return Err(Error::Positional {
            scale_index,
            bank_rows,
            tokens,
        });
    }
    let patches = g.constant(patches);
    let projected = g.matmul(patches, params.patch_projection)?;
    ctx.counters.patch_projections.fetch_add(1, Ordering::Relaxed);
    let z = g.concat_rows(&[params.cls_embedding, projected])?;
    g.add(z, bank)
}

/// Token embedding of one image.
pub fn tokenize(model: &Model, image: &Tensor, scale_index: usize) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let params = model.params.bind(&mut g, false);
    let z = tokenize_on(&mut g, model.ctx(), &params.backbone, image, scale_index)?;
    let s = image.shape();
    Ok(TokenSequence {
        tokens: g.value(z).clone(),
        scale_index,
        source_image_shape: [s[0], s[1], s[2]],
    })
}

/// Bilinear resampling of a positional bank to a `target_grid`² patch grid;
/// the CLS row is copied unchanged.
pub fn interpolate_pos_embedding(base: &Tensor, target_grid: usize) -> Result<Tensor> {
    if !base.is_matrix() || base.rows() < 2 {
        return dim_err("interpolate_pos_embedding", base.shape(), &[]);
    }
    let n = base.rows() - 1;
    let grid = libm::round(libm::sqrt(n as f64)) as usize;
    if grid * grid != n {
        return Err(Error::Grid { tokens: n });
    }
    if target_grid == 0 {
        return Err(Error::Grid { tokens: 0 });
    }
    let d = base.cols();
    let mut out = Vec::with_capacity((target_grid * target_grid + 1) * d);
    out.extend_from_slice(base.row(0));
    out.extend(resize_bilinear(
        &base.data()[d..],
        grid,
        grid,
        d,
        target_grid,
        target_grid,
    ));
    Tensor::new(&[target_grid * target_grid + 1, d], out)
}

/// Which stream supplies the residual in a cross-attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualSource {
    /// The query-side stream.
    #[default]
    Query,
    /// The key/value-side stream; exists only to test query consistency.
    KeyValue,
}

/// Layers of the cross streams that receive key/value noise.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum NoiseLayers {
    #[default]
    All,
    Only(Vec<usize>),
}

impl NoiseLayers {
    pub fn contains(&self, layer: usize) -> bool {
        match self {
            Self::All => true,
            Self::Only(v) => v.contains(&layer),
        }
    }
}

/// Options for a paired four-stream forward.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuadOptions {
    pub noise: Option<NoiseSpec>,
    pub noise_layers: NoiseLayers,
    pub residual: ResidualSource,
}

/// One transformer layer: pre-norm attention of `zq` over `zkv`, residual, MLP.
pub fn layer_on(
    g: &mut Graph,
    ctx: Ctx<'_>,
    layer: &LayerParams<Var>,
    zq: Var,
    zkv: Var,
    noise: &NoiseSpec,
    residual: ResidualSource,
    rng: &mut dyn rand::RngCore,
) -> Result<(Var, Tensor)> {
    let eps = ctx.config.ln_eps;
    let nq = layer_norm_on(g, &layer.norm1, zq, eps)?;
    let nkv = if zkv == zq {
        nq
    } else {
        layer_norm_on(g, &layer.norm1, zkv, eps)?
    };
    let trace = attend_on(g, &layer.attn, nq, nkv, noise, rng)?;
    let res = match residual {
        ResidualSource::Query => zq,
        ResidualSource::KeyValue => zkv,
    };
    if g.value(res).shape() != g.value(trace.out).shape() {
        return dim_err("residual", g.value(res).shape(), g.value(trace.out).shape());
    }
    let out = residual_block_on(g, res, trace.out, &layer.mlp, &layer.norm2, eps)?;
    Ok((out, trace.weights))
}

/// Final-norm CLS row of a token sequence.
fn cls_feature(g: &mut Graph, ctx: Ctx<'_>, params: &BackboneParams<Var>, z: Var) -> Result<Var> {
    let cls = g.slice_rows(z, 0, 1)?;
    layer_norm_on(g, &params.final_norm, cls, ctx.config.ln_eps)
}

/// Single self-attention stream.
#[derive(Debug, Clone)]
pub struct StreamTrace {
    pub feature: Var,
    /// Output tokens of every layer.
    pub layers: Vec<Var>,
    /// Attention weights of every layer.
    pub attention: Vec<Tensor>,
}

/// Embeds one image with self-attention only; the evaluation path.
pub fn embed_on(
    g: &mut Graph,
    ctx: Ctx<'_>,
    params: &BackboneParams<Var>,
    image: &Tensor,
    scale_index: usize,
) -> Result<StreamTrace> {
    let z0 = tokenize_on(g, ctx, params, image, scale_index)?;
    ctx.counters.backbone_forwards.fetch_add(1, Ordering::Relaxed);
    let mut rng = NoiseSpec::OFF.rng();
    let mut z = z0;
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut attention = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, w) = layer_on(g, ctx, layer, z, z, &NoiseSpec::OFF, ResidualSource::Query, &mut rng)?;
        z = next;
        layers.push(z);
        attention.push(w);
    }
    Ok(StreamTrace {
        feature: cls_feature(g, ctx, params, z)?,
        layers,
        attention,
    })
}

/// The four CLS features of a paired forward.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQuad<T = Tensor> {
    pub f_s: T,
    pub f_s2t: T,
    pub f_t2s: T,
    pub f_t: T,
}

/// Graph nodes and diagnostics of a paired forward.
#[derive(Debug, Clone)]
pub struct QuadTrace {
    pub quad: FeatureQuad<Var>,
    /// Layer outputs of the source and target self-attention streams.
    pub layers_s: Vec<Var>,
    pub layers_t: Vec<Var>,
    pub layers_s2t: Vec<Var>,
    pub layers_t2s: Vec<Var>,
    /// Per-layer attention weights, per stream.
    pub attention: FeatureQuad<Vec<Tensor>>,
}

/// Paired forward: each image is tokenized once and the tokens feed all four streams.
pub fn forward_quad_on(
    g: &mut Graph,
    ctx: Ctx<'_>,
    params: &BackboneParams<Var>,
    src: (&Tensor, usize),
    tgt: (&Tensor, usize),
    options: &QuadOptions,
    rng: &mut dyn rand::RngCore,
) -> Result<QuadTrace> {
    let zs0 = tokenize_on(g, ctx, params, src.0, src.1)?;
    let zt0 = tokenize_on(g, ctx, params, tgt.0, tgt.1)?;
    ctx.counters.backbone_forwards.fetch_add(4, Ordering::Relaxed);
    let off = NoiseSpec::OFF;
    let (mut s, mut t, mut st, mut ts) = (zs0, zt0, zs0, zt0);
    let n = params.layers.len();
    let mut trace = QuadTrace {
        quad: FeatureQuad {
            f_s: zs0,
            f_s2t: zs0,
            f_t2s: zt0,
            f_t: zt0,
        },
        layers_s: Vec::with_capacity(n),
        layers_t: Vec::with_capacity(n),
        layers_s2t: Vec::with_capacity(n),
        layers_t2s: Vec::with_capacity(n),
        attention: FeatureQuad {
            f_s: Vec::with_capacity(n),
            f_s2t: Vec::with_capacity(n),
            f_t2s: Vec::with_capacity(n),
            f_t: Vec::with_capacity(n),
        },
    };
    for (l, layer) in params.layers.iter().enumerate() {
        let cross_noise = match &options.noise {
            Some(spec) if options.noise_layers.contains(l) => *spec,
            _ => off,
        };
        let (s_next, ws) = layer_on(g, ctx, layer, s, s, &off, ResidualSource::Query, rng)?;
        let (t_next, wt) = layer_on(g, ctx, layer, t, t, &off, ResidualSource::Query, rng)?;
        let (st_next, wst) = layer_on(g, ctx, layer, s, t, &cross_noise, options.residual, rng)?;
        let (ts_next, wts) = layer_on(g, ctx, layer, t, s, &cross_noise, options.residual, rng)?;
        (s, t, st, ts) = (s_next, t_next, st_next, ts_next);
        trace.layers_s.push(s);
        trace.layers_t.push(t);
        trace.layers_s2t.push(st);
        trace.layers_t2s.push(ts);
        trace.attention.f_s.push(ws);
        trace.attention.f_t.push(wt);
        trace.attention.f_s2t.push(wst);
        trace.attention.f_t2s.push(wts);
    }
    trace.quad = FeatureQuad {
        f_s: cls_feature(g, ctx, params, s)?,
        f_s2t: cls_feature(g, ctx, params, st)?,
        f_t2s: cls_feature(g, ctx, params, ts)?,
        f_t: cls_feature(g, ctx, params, t)?,
    };
    Ok(trace)
}

/// Values of a paired forward.
#[derive(Debug, Clone)]
pub struct QuadOutput {
    pub quad: FeatureQuad,
    pub layers_s: Vec<Tensor>,
    pub layers_t: Vec<Tensor>,
    pub layers_s2t: Vec<Tensor>,
    pub layers_t2s: Vec<Tensor>,
    pub attention: FeatureQuad<Vec<Tensor>>,
}

/// Paired forward on concrete tensors.
pub fn forward_quad(
    model: &Model,
    src: (&Tensor, usize),
    tgt: (&Tensor, usize),
    options: &QuadOptions,
    rng: &mut dyn rand::RngCore,
) -> Result<QuadOutput> {
    let mut g = Graph::new();
    let params = model.params.bind(&mut g, false);
    let tr = forward_quad_on(&mut g, model.ctx(), &params.backbone, src, tgt, options, rng)?;
    let val = |v: Var| g.value(v).clone();
    Ok(QuadOutput {
        quad: FeatureQuad {
            f_s: val(tr.quad.f_s),
            f_s2t: val(tr.quad.f_s2t),
            f_t2s: val(tr.quad.f_t2s),
            f_t: val(tr.quad.f_t),
        },
        layers_s: tr.layers_s.iter().map(|&v| val(v)).collect(),
        layers_t: tr.layers_t.iter().map(|&v| val(v)).collect(),
        layers_s2t: tr.layers_s2t.iter().map(|&v| val(v)).collect(),
        layers_t2s: tr.layers_t2s.iter().map(|&v| val(v)).collect(),
        attention: tr.attention,
    })
}

/// Self-attention feature of one image.
pub fn embed(model: &Model, image: &Tensor, scale_index: usize) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let params = model.params.bind(&mut g, false);
    let tr = embed_on(&mut g, model.ctx(), &params.backbone, image, scale_index)?;
    Ok((g.value(tr.feature).clone(), tr.attention))
}

/// Bias-free linear logits `f · g` for a D×C classifier.
pub fn classify(classifier: &Tensor, f: &Tensor) -> Result<Tensor> {
    let row = Tensor::row_vector(f.data().to_vec());
    matmul(&row, classifier)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dim: usize, layers: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            dim,
            layers,
            heads,
            mlp_hidden: 2 * dim,
            patch: 8,
            channels: 3,
            classes: 4,
            scales: ScaleSet::new(alloc::vec![16, 24, 32], 8).unwrap(),
            native_side: 24,
            ln_eps: 1e-6,
        }
    }

    fn image(seed: u64, side: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_matrix(&mut rng, side * side, 3, 1.0)
            .reshape(&[side, side, 3])
            .unwrap()
    }

    #[test]
    fn token_count_arithmetic() {
        let model = Model::init(tiny_config(16, 1, 2), InitSpec::default(), 1).unwrap();
        let z = tokenize(&model, &image(1, 16), 0).unwrap();
        assert_eq!(z.tokens.shape(), &[5, 16]);
        assert_eq!(z.source_image_shape, [16, 16, 3]);
    }

    #[test]
    fn zero_image_zero_projection_gives_embeddings_only() {
        let mut model = Model::init(tiny_config(16, 1, 2), InitSpec::default(), 2).unwrap();
        model.params.backbone.patch_projection = Tensor::zeros(&[192, 16]);
        let z = tokenize(&model, &Tensor::zeros(&[24, 24, 3]), 1).unwrap();
        let b = &model.params.backbone;
        let pos = &b.pos_embeddings[1];
        for r in 0..10 {
            for c in 0..16 {
                let expected = if r == 0 {
                    b.cls_embedding.at(0, c) + pos.at(0, c)
                } else {
                    pos.at(r, c)
                };
                assert_eq!(z.tokens.at(r, c), expected);
            }
        }
    }

    #[test]
    fn patch_rows_match_crop_flatten_project() {
        let model = Model::init(tiny_config(16, 1, 2), InitSpec::default(), 3).unwrap();
        let img = image(4, 16);
        let z = tokenize(&model, &img, 0).unwrap();
        let b = &model.params.backbone;
        for (p, (gy, gx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let mut crop = Vec::new();
            for y in 0..8 {
                for x in 0..8 {
                    for c in 0..3 {
                        crop.push(img.data()[((gy * 8 + y) * 16 + gx * 8 + x) * 3 + c]);
                    }
                }
            }
            let proj = Tensor::row_vector(crop).matmul(&b.patch_projection).unwrap();
            for c in 0..16 {
                let expected = proj.at(0, c) + b.pos_embeddings[0].at(p + 1, c);
                assert!((z.tokens.at(p + 1, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiling_and_positional_errors() {
        let model = Model::init(tiny_config(16, 1, 2), InitSpec::default(), 5).unwrap();
        assert!(matches!(
            tokenize(&model, &Tensor::zeros(&[20, 20, 3]), 0),
            Err(Error::Tiling { .. })
        ));
        assert!(matches!(
            tokenize(&model, &image(1, 16), 2),
            Err(Error::Positional { .. })
        ));
    }

    #[test]
    fn pos_interpolation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = random_matrix(&mut rng, 10, 4, 1.0);
        assert_eq!(interpolate_pos_embedding(&base, 3).unwrap(), base);

        let flat = Tensor::full(&[10, 4], 0.25);
        let up = interpolate_pos_embedding(&flat, 5).unwrap();
        assert_eq!(up.shape(), &[26, 4]);
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        // 2×2 ramp over columns: [[0, 1], [0, 1]] → half-pixel 4×4
        let mut rows = alloc::vec![alloc::vec![9.0]];
        for _y in 0..2 {
            for x in 0..2 {
                rows.push(alloc::vec![x as f64]);
            }
        }
        let ramp = Tensor::from_rows(&rows).unwrap();
        let up = interpolate_pos_embedding(&ramp, 4).unwrap();
        assert_eq!(up.at(0, 0), 9.0);
        let expected = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(up.at(1 + y * 4 + x, 0), expected[x]);
            }
        }

        let bad = Tensor::zeros(&[6, 4]);
        assert!(matches!(
            interpolate_pos_embedding(&bad, 3),
            Err(Error::Grid { tokens: 5 })
        ));
    }

    #[test]
    fn degenerate_pair_gives_equal_streams() {
        let model = Model::init(tiny_config(16, 2, 4), InitSpec::default(), 7).unwrap();
        let img = image(8, 24);
        let opts = QuadOptions::default();
        let out = forward_quad(&model, (&img, 1), (&img, 1), &opts, &mut NoiseSpec::OFF.rng()).unwrap();
        assert!(out.quad.f_s.bit_eq(&out.quad.f_s2t));
        assert!(out.quad.f_t.bit_eq(&out.quad.f_t2s));
        let again = forward_quad(&model, (&img, 1), (&img, 1), &opts, &mut NoiseSpec::OFF.rng()).unwrap();
        assert!(again.quad.f_s.bit_eq(&out.quad.f_s));
        assert!(again.quad.f_t2s.bit_eq(&out.quad.f_t2s));
    }

    #[test]
    fn tokenizes_each_image_once() {
        let model = Model::init(tiny_config(16, 2, 4), InitSpec::default(), 9).unwrap();
        let (a, b) = (image(1, 16), image(2, 24));
        forward_quad(
            &model,
            (&a, 0),
            (&b, 1),
            &QuadOptions::default(),
            &mut NoiseSpec::OFF.rng(),
        )
        .unwrap();
        assert_eq!(model.counters.patch_projections(), 2);
        assert_eq!(model.counters.backbone_forwards(), 4);
    }

    #[test]
    fn eval_feature_equals_self_stream() {
        let model = Model::init(tiny_config(16, 2, 4), InitSpec::default(), 10).unwrap();
        let (a, b) = (image(3, 32), image(4, 24));
        let out = forward_quad(
            &model,
            (&a, 2),
            (&b, 1),
            &QuadOptions::default(),
            &mut NoiseSpec::OFF.rng(),
        )
        .unwrap();
        assert!(embed(&model, &a, 2).unwrap().0.bit_eq(&out.quad.f_s));
        assert!(embed(&model, &b, 1).unwrap().0.bit_eq(&out.quad.f_t));
    }

    #[test]
    fn classify_cases() {
        let g = Tensor::from_fn(&[3, 2], |i| i as f64 + 1.0);
        assert!(classify(&g, &Tensor::zeros(&[1, 3]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let picked = classify(&g, &Tensor::row_vector(alloc::vec![0.0, 1.0, 0.0])).unwrap();
        assert_eq!(picked.data(), g.row(1));
        assert!(classify(&g, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn every_parameter_has_a_path() {
        let model = Model::init(tiny_config(16, 2, 4), InitSpec::default(), 11).unwrap();
        let paths = model.params.paths();
        assert_eq!(paths.len(), model.params.tensors().len());
        assert!(paths.contains(&"backbone.layers.1.attn.w_v".into()));
        assert!(paths.contains(&"backbone.pos_embedding.2".into()));
        let mut sorted = paths.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), paths.len());
    }

    fn hand_config() -> ModelConfig {
        ModelConfig {
            dim: 4,
            layers: 1,
            heads: 1,
            mlp_hidden: 3,
            patch: 2,
            channels: 1,
            classes: 2,
            scales: ScaleSet::new(alloc::vec![4], 2).unwrap(),
            native_side: 4,
            ln_eps: 1e-5,
        }
    }

    fn hand_ln(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
        x.iter()
            .zip(gain.iter().zip(bias))
            .map(|(a, (g, b))| (a - m) / libm::sqrt(v + eps) * g + b)
            .collect()
    }

    fn hand_mat(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
        let (k, n) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                (0..n)
                    .map(|j| (0..k).map(|i| row[i] * w.data()[i * n + j]).sum())
                    .collect()
            })
            .collect()
    }

    fn hand_tokens(p: &BackboneParams, img: &Tensor) -> Vec<Vec<f64>> {
        let mut z = alloc::vec![p
            .cls_embedding
            .row(0)
            .iter()
            .zip(p.pos_embeddings[0].row(0))
            .map(|(a, b)| a + b)
            .collect::<Vec<f64>>()];
        for (i, (gy, gx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let flat: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(y, x)| img.data()[(gy * 2 + y) * 4 + gx * 2 + x])
                .collect();
            let proj = hand_mat(&[flat], &p.patch_projection).remove(0);
            z.push(
                proj.iter()
                    .zip(p.pos_embeddings[0].row(i + 1))
                    .map(|(a, b)| a + b)
                    .collect(),
            );
        }
        z
    }

    fn hand_block(l: &LayerParams, zq: &[Vec<f64>], zkv: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
        let ln1 = |z: &[Vec<f64>]| -> Vec<Vec<f64>> {
            z.iter()
                .map(|r| hand_ln(r, l.norm1.gain.data(), l.norm1.bias.data(), eps))
                .collect()
        };
        let (nq, nkv) = (ln1(zq), ln1(zkv));
        let q = hand_mat(&nq, &l.attn.w_q);
        let k = hand_mat(&nkv, &l.attn.w_k);
        let v = hand_mat(&nkv, &l.attn.w_v);
        let mut out = Vec::new();
        for (qi, res) in q.iter().zip(zq) {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| libm::exp(s - mx)).collect();
            let tot: f64 = e.iter().sum();
            let h: Vec<f64> = (0..4)
                .map(|d| res[d] + e.iter().zip(&v).map(|(w, vj)| w / tot * vj[d]).sum::<f64>())
                .collect();
            let n2 = hand_ln(&h, l.norm2.gain.data(), l.norm2.bias.data(), eps);
            let hid: Vec<f64> = hand_mat(&[n2], &l.mlp.w1)
                .remove(0)
                .iter()
                .zip(l.mlp.b1.data())
                .map(|(a, b)| {
                    let x = a + b;
                    0.5 * x * (1.0 + libm::erf(x / libm::sqrt(2.0)))
                })
                .collect();
            let m = hand_mat(&[hid], &l.mlp.w2).remove(0);
            out.push((0..4).map(|d| h[d] + m[d] + l.mlp.b2.data()[d]).collect());
        }
        out
    }

    #[test]
    fn single_layer_matches_hand_computation() {
        let mut model = Model::init(hand_config(), InitSpec::default(), 12).unwrap();
        let mut t = 0.0;
        model.params.visit_mut(&mut |_, x| {
            for v in x.data_mut() {
                t += 1.0;
                *v = 0.6 * libm::sin(1.7 * t) + if t as i64 % 5 == 0 { 0.3 } else { 0.0 };
            }
        });
        let a = Tensor::from_fn(&[4, 4, 1], |i| libm::cos(i as f64 * 0.9));
        let b = Tensor::from_fn(&[4, 4, 1], |i| (i as f64 * 0.37).fract() - 0.5);
        let out = forward_quad(
            &model,
            (&a, 0),
            (&b, 0),
            &QuadOptions::default(),
            &mut NoiseSpec::OFF.rng(),
        )
        .unwrap();

        let p = &model.params.backbone;
        let eps = model.config.ln_eps;
        let (za, zb) = (hand_tokens(p, &a), hand_tokens(p, &b));
        let l = &p.layers[0];
        let fin = |z: Vec<Vec<f64>>| hand_ln(&z[0], p.final_norm.gain.data(), p.final_norm.bias.data(), eps);
        let expected = [
            (fin(hand_block(l, &za, &za, eps)), &out.quad.f_s),
            (fin(hand_block(l, &za, &zb, eps)), &out.quad.f_s2t),
            (fin(hand_block(l, &zb, &za, eps)), &out.quad.f_t2s),
            (fin(hand_block(l, &zb, &zb, eps)), &out.quad.f_t),
        ];
        for (want, got) in expected {
            assert_eq!(got.numel(), 4);
            for (w, g) in want.iter().zip(got.data()) {
                assert!((w - g).abs() < 1e-12, "{w} vs {g}");
            }
        }
        assert!(out.quad.f_s.max_abs_diff(&out.quad.f_s2t) > 1e-6);
    }

    #[test]
    fn one_parameter_set_drives_all_streams() {
        let model = Model::init(tiny_config(16, 2, 4), InitSpec::default(), 13).unwrap();
        let (a, b) = (image(5, 24), image(6, 24));
        let run = |m: &Model| {
            forward_quad(m, (&a, 1), (&b, 1), &QuadOptions::default(), &mut NoiseSpec::OFF.rng())
                .unwrap()
                .quad
        };
        let base = run(&model);
        let paths = [
            "backbone.patch_projection",
            "backbone.cls_embedding",
            "backbone.pos_embedding.1",
            "backbone.layers.0.attn.w_q",
            "backbone.layers.0.attn.w_k",
            "backbone.layers.0.attn.w_v",
            "backbone.layers.1.mlp.w1",
            "backbone.layers.1.norm2.gain",
            "backbone.final_norm.bias",
        ];
        for path in paths {
            let mut m = model.clone();
            let mut hit = false;
            m.params.visit_mut(&mut |p, t| {
                if p == path {
                    for (i, v) in t.data_mut().iter_mut().enumerate() {
                        *v += 0.05 * libm::sin(i as f64 + 1.0);
                    }
                    hit = true;
                }
            });
            assert!(hit, "{path}");
            let q = run(&m);
            for (name, x, y) in [
                ("f_s", &q.f_s, &base.f_s),
                ("f_s2t", &q.f_s2t, &base.f_s2t),
                ("f_t2s", &q.f_t2s, &base.f_t2s),
                ("f_t", &q.f_t, &base.f_t),
            ] {
                assert!(x.max_abs_diff(y) > 1e-9, "{path} left {name} unchanged");
            }
        }
    }

    #[test]
    fn key_value_residual_misaligns_queries() {
        let model = Model::init(tiny_config(16, 2, 4), InitSpec::default(), 14).unwrap();
        let next = &model.params.backbone.layers[1];
        let normed = |z: &Tensor| -> Tensor {
            let mut g = Graph::new();
            let x = g.constant(z.clone());
            let norm = next.norm1.map(&mut |t| g.constant(t.clone()));
            let y = layer_norm_on(&mut g, &norm, x, model.config.ln_eps).unwrap();
            g.value(y).clone()
        };
        let mean_div = |residual: ResidualSource, a: &Tensor, b: &Tensor| -> f64 {
            let opts = QuadOptions {
                residual,
                ..Default::default()
            };
            let out = forward_quad(&model, (a, 1), (b, 1), &opts, &mut NoiseSpec::OFF.rng()).unwrap();
            let d = crate::attention::attention_divergence(
                &next.attn,
                &normed(&out.layers_s[0]),
                &normed(&out.layers_s2t[0]),
            )
            .unwrap();
            d.iter().sum::<f64>() / d.len() as f64
        };
        for seed in 0..8 {
            let (a, b) = (image(100 + seed, 24), image(200 + seed, 24));
            let aligned = mean_div(ResidualSource::Query, &a, &b);
            let swapped = mean_div(ResidualSource::KeyValue, &a, &b);
            assert!(swapped > aligned, "seed {seed}: {swapped} <= {aligned}");
        }
    }
}
