//! Synthetic two-domain shape classification.
//!
//! A class is a shape. Domains differ in colour, contrast, texture and the
//! range of object sizes, so the source/target gap has an appearance part and
//! a scale part while the class-defining outline is shared.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Number of distinct shapes the renderer knows.
pub const SHAPES: usize = 8;

/// Appearance and object-size statistics of one domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainStyle {
    pub background: [f64; 3],
    pub foreground: [f64; 3],
    /// Per-sample uniform jitter of both colours.
    pub color_jitter: f64,
    /// Multiplicative contrast about 0.5.
    pub contrast: f64,
    /// Std of additive per-pixel noise.
    pub texture: f64,
    /// Object side as a fraction of the image side, drawn uniformly.
    pub size_range: (f64, f64),
    /// Colour offset added to the foreground as a function of the class.
    /// Non-zero values correlate appearance with labels inside the domain.
    pub class_tint: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomainSpec {
    pub classes: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub side: usize,
    pub source: DomainStyle,
    pub target: DomainStyle,
    pub seed: u64,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            source_per_class: 40,
            target_per_class: 40,
            side: 24,
            source: DomainStyle {
                background: [0.1, 0.15, 0.3],
                foreground: [0.95, 0.85, 0.4],
                color_jitter: 0.05,
                contrast: 1.0,
                texture: 0.05,
                size_range: (0.6, 0.95),
                class_tint: 0.0,
            },
            target: DomainStyle {
                background: [0.2, 0.2, 0.3],
                foreground: [0.85, 0.8, 0.5],
                color_jitter: 0.05,
                contrast: 0.9,
                texture: 0.08,
                size_range: (0.4, 0.6),
                class_tint: 0.0,
            },
            seed: 7,
        }
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > SHAPES {
            return Err(Error::Spec(format!(
                "classes must be in 1..={SHAPES}, got {}",
                self.classes
            )));
        }
        if self.source_per_class == 0 || self.target_per_class == 0 {
            return Err(Error::Spec("samples per class must be positive".into()));
        }
        if self.side < 4 {
            return Err(Error::Spec(format!("image side {} is too small", self.side)));
        }
        for (name, s) in [("source", &self.source), ("target", &self.target)] {
            let (lo, hi) = s.size_range;
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::Spec(format!(
                    "{name} size range ({lo}, {hi}) is not within (0, 1]"
                )));
            }
            if !(s.texture >= 0.0 && s.color_jitter >= 0.0 && s.contrast.is_finite()) {
                return Err(Error::Spec(format!("{name} style has a negative spread")));
            }
        }
        Ok(())
    }
}

/// Labelled source images.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl SourceSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Target images. Their labels are kept aside and only read by evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    images: Vec<Tensor>,
    hidden_labels: Vec<usize>,
}

impl TargetSet {
    pub fn new(images: Vec<Tensor>, hidden_labels: Vec<usize>) -> Result<Self> {
        if images.len() != hidden_labels.len() {
            return Err(Error::Contract(format!(
                "{} target images with {} labels",
                images.len(),
                hidden_labels.len()
            )));
        }
        Ok(Self { images, hidden_labels })
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// Ground truth for scoring; training never reads it.
    pub fn hidden_labels(&self) -> &[usize] {
        &self.hidden_labels
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub source: SourceSet,
    pub target: TargetSet,
    pub classes: usize,
}

/// Renders both domains. Samples are interleaved by class.
pub fn generate_domains(spec: &SyntheticDomainSpec) -> Result<DomainData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(3);
    let (mut si, mut sl) = (Vec::new(), Vec::new());
    for i in 0..spec.source_per_class * spec.classes {
        let c = i % spec.classes;
        si.push(render(&mut rng, c, spec.side, &spec.source));
        sl.push(c);
    }
    let (mut ti, mut tl) = (Vec::new(), Vec::new());
    for i in 0..spec.target_per_class * spec.classes {
        let c = i % spec.classes;
        ti.push(render(&mut rng, c, spec.side, &spec.target));
        tl.push(c);
    }
    Ok(DomainData {
        source: SourceSet { images: si, labels: sl },
        target: TargetSet::new(ti, tl)?,
        classes: spec.classes,
    })
}

/// Shape membership in object coordinates, `u, v ∈ [-1, 1]`.
fn inside(shape: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let box_r = au.max(av);
    if box_r > 1.0 {
        return false;
    }
    let r = libm::sqrt(u * u + v * v);
    match shape {
        0 => r <= 1.0,
        1 => (0.55..=1.0).contains(&r),
        2 => au <= 0.3 || av <= 0.3,
        3 => box_r >= 0.6,
        4 => (au - av).abs() <= 0.4,
        5 => au <= (v + 1.0) * 0.5,
        6 => ((v + 1.0) * 2.0) as usize % 2 == 0,
        _ => au + av <= 1.0,
    }
}

fn render(rng: &mut ChaCha8Rng, class: usize, side: usize, style: &DomainStyle) -> Tensor {
    let (lo, hi) = style.size_range;
    let size = if hi > lo { rng.random_range(lo..=hi) } else { lo } * side as f64;
    let half = size * 0.5;
    let slack = (side as f64 - size).max(0.0);
    let cx = half + rng.random::<f64>() * slack;
    let cy = half + rng.random::<f64>() * slack;
    let tint = tint(class);
    let mut fg = [0.0; 3];
    let mut bg = [0.0; 3];
    for ch in 0..3 {
        let j: f64 = rng.random_range(-1.0..=1.0);
        fg[ch] = style.foreground[ch] + style.color_jitter * j + style.class_tint * tint[ch];
        let j: f64 = rng.random_range(-1.0..=1.0);
        bg[ch] = style.background[ch] + style.color_jitter * j;
    }

    // 2×2 supersampling for soft edges
    let offsets = [0.25, 0.75];
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let mut cover = 0.0;
            for oy in offsets {
                for ox in offsets {
                    let u = (x as f64 + ox - cx) / half;
                    let v = (y as f64 + oy - cy) / half;
                    if inside(class, u, v) {
                        cover += 0.25;
                    }
                }
            }
            for ch in 0..3 {
                let base = bg[ch] + (fg[ch] - bg[ch]) * cover;
                let n: f64 = rng.sample(StandardNormal);
                data.push(0.5 + style.contrast * (base - 0.5) + style.texture * n);
            }
        }
    }
    Tensor::new(&[side, side, 3], data).expect("side is positive")
}

/// Fixed class-dependent colour direction.
fn tint(class: usize) -> [f64; 3] {
    const T: [[f64; 3]; SHAPES] = [
        [1.0, -0.5, -0.5],
        [-0.5, 1.0, -0.5],
        [-0.5, -0.5, 1.0],
        [0.5, 0.5, -1.0],
        [-1.0, 0.5, 0.5],
        [0.5, -1.0, 0.5],
        [0.7, 0.7, 0.7],
        [-0.7, -0.7, -0.7],
    ];
    T[class % SHAPES]
}
