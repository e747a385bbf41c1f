//! AdamW, the warmup/cosine learning-rate schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Real, Result, VilError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `decay[i]` selects whether parameter `i` receives weight
    /// decay (biases and norm gains usually do not).
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], decay: &[bool], lr: f64) -> Result<()> {
        if grads.len() != params.len() || decay.len() != params.len() {
            return Err(VilError::dim(format!(
                "adamw: {} params, {} grads, {} decay flags",
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(VilError::dim(format!(
                    "adamw: param {i} has {} elements, grad has {}",
                    p.len(),
                    g.len()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(VilError::dim("adamw: parameter layout changed between steps"));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (step, eps_t, lr_t) = (T::lit(lr / bc1), T::lit(eps), T::lit(lr));
        let inv_bc2 = T::lit(1.0 / bc2);
        for (i, p) in params.iter_mut().enumerate() {
            let shrink = if decay[i] {
                T::one() - lr_t * T::lit(weight_decay)
            } else {
                T::one()
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = grads[i][j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                *x = *x * shrink - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps_t);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `end_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub end_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupCosine {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.end_lr;
        }
        let p = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.end_lr + 0.5 * (self.base_lr - self.end_lr) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

pub fn global_norm<T: Real>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| {
            let x = g.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        // The relative margin keeps the rescaled norm under the bound after
        // rounding in 32-bit.
        let scale = T::lit(max_norm / norm * (1.0 - 1e-6));
        grads.iter_mut().flatten().for_each(|g| *g = *g * scale);
    }
    norm
}
