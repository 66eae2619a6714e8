//! AdamW with per-group learning rates and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Parameterized, Tensor};

/// Linear warmup from 0, then cosine decay to 0 at `total_steps`.
///
/// Step indices are zero-based: step 0 gets factor 0, step `warmup_steps`
/// gets factor 1, step `total_steps` gets factor 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn factor(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Maps parameter-name prefixes to base learning rates. The first matching
/// prefix wins; unmatched trainable parameters use `default`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrMap {
    groups: Vec<(String, f64)>,
    default: f64,
}

impl LrMap {
    pub fn new(groups: Vec<(String, f64)>, default: f64) -> Result<Self> {
        if let Some((name, lr)) = groups.iter().find(|(_, lr)| *lr < 0.0 || !lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate for group {name:?} must be >= 0, got {lr}"
            )));
        }
        if default < 0.0 || !default.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "default learning rate must be >= 0, got {default}"
            )));
        }
        Ok(Self { groups, default })
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.groups
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(self.default, |(_, lr)| *lr)
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: Vec<(Tensor, Tensor)>,
    t: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            moments: Vec::new(),
            t: 0,
        }
    }
}

impl AdamW {
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable parameter of `model` using the
    /// gradients currently stored in it. Returns the schedule factor used.
    pub fn step<M: Parameterized + ?Sized>(
        &mut self,
        model: &mut M,
        lrs: &LrMap,
        schedule: &LrSchedule,
        step: usize,
    ) -> f64 {
        let factor = schedule.factor(step);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let moments = &mut self.moments;
        let mut slot = 0usize;
        model.visit_params_mut("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            if moments.len() <= slot {
                moments.push((Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            }
            let (m, v) = &mut moments[slot];
            slot += 1;
            let lr = lrs.lr_for(name) * factor;
            let w = p.value.data_mut();
            for (((wi, gi), mi), vi) in w.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= lr * (mhat / (vhat.sqrt() + eps) + wd * *wi);
            }
        });
        factor
    }
}
