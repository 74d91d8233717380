//! Adamax with coupled weight decay, and the cosine learning-rate schedule.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamaxConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Added to the gradient as `weight_decay · param`.
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamaxConfig,
    m: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    t: u64,
}

impl OptimizerState {
    pub fn new(config: AdamaxConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            u: Vec::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn infinity_norm(&self, i: usize) -> &[f64] {
        &self.u[i]
    }

    /// One update with learning rate `lr`. `names` label parameters in errors.
    ///
    /// ```text
    /// g ← grad + wd·p;  m ← β₁m + (1−β₁)g;  u ← max(β₂u, |g|)
    /// p ← p − lr/(1−β₁ᵗ) · m/(u + eps)
    /// ```
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "adamax_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamax_step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient(name));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.u = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::invalid("adamax_step", "parameter layout changed between steps"));
        }
        self.t += 1;
        let AdamaxConfig {
            beta1,
            beta2,
            weight_decay,
            eps,
            ..
        } = self.config;
        let step = lr / (1.0 - beta1.powi(self.t as i32));
        for ((p, g), (m, u)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.u.iter_mut())) {
            for (((pj, &gj), mj), uj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(u.iter_mut()) {
                let gj = gj + weight_decay * *pj;
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *uj = (beta2 * *uj).max(gj.abs());
                *pj -= step * *mj / (*uj + eps);
            }
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π(e−1)/(E−1)))` for epoch `e` in `1..=E`;
/// `lr_max` when `E < 2`.
pub fn cosine_lr(e: usize, max_epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    if max_epochs < 2 {
        return lr_max;
    }
    let e = e.clamp(1, max_epochs);
    let phase = std::f64::consts::PI * (e - 1) as f64 / (max_epochs - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}
