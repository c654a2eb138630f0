//! SGD with momentum and L2 weight decay.

use alloc::vec::Vec;

use crate::dat::DacsmParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter { name, value: v });
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::Parameter {
                name: "momentum",
                value: self.momentum,
            });
        }
        Ok(())
    }
}

/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Option<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: None }
    }

    pub fn step(&mut self, params: &mut DacsmParams, grads: &DacsmParams) {
        let grad_data: Vec<&[f64]> = grads.tensors().iter().map(|t| t.data()).collect();
        let velocity = self
            .velocity
            .get_or_insert_with(|| grad_data.iter().map(|g| alloc::vec![0.0; g.len()]).collect());
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        let mut i = 0;
        params.visit_mut(&mut |_, t| {
            let v = &mut velocity[i];
            for ((p, &g), vi) in t.data_mut().iter_mut().zip(grad_data[i]).zip(v.iter_mut()) {
                *vi = momentum * *vi + (g + weight_decay * *p);
                *p -= lr * *vi;
            }
            i += 1;
        });
    }
}
