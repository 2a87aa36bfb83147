use alloc::vec::Vec;

use super::params::{GradStore, Params};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_half_steps: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad("need 0 < lr_min <= lr_max");
        }
        if self.cycle_half_steps == 0 {
            return bad("cycle_half_steps must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }

    pub fn schedule(&self) -> CyclicLr {
        CyclicLr { lr_min: self.lr_min, lr_max: self.lr_max, half: self.cycle_half_steps }
    }
}

/// Triangular cyclic learning rate: `lr_min` at step 0, `lr_max` at `half`,
/// back to `lr_min` at `2 * half`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicLr {
    pub lr_min: f64,
    pub lr_max: f64,
    pub half: usize,
}

impl CyclicLr {
    pub fn lr(&self, step: usize) -> f64 {
        let pos = step % (2 * self.half);
        let frac = if pos <= self.half { pos as f64 / self.half as f64 } else { (2 * self.half - pos) as f64 / self.half as f64 };
        self.lr_min * (1.0 - frac) + self.lr_max * frac
    }
}

/// SGD with heavy-ball momentum: `v = mu v + g`, `p -= lr v`.
/// Non-trainable buffers are left alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &Params, momentum: f64) -> Sgd {
        Sgd { momentum, velocity: params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect() }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut Params, grads: &GradStore, lr: f64) {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let v = &mut self.velocity[id.index()];
            v.scale(self.momentum);
            v.add_assign(grads.get(id));
            params.value_mut(id).add_scaled(v, -lr);
        }
    }
}
