//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length; `None` means 10% of the total steps.
    pub warmup_steps: Option<u64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { base_lr: 1e-4, min_lr: 0.0, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05, warmup_steps: None }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            problems.push(format!("base_lr must be finite and >= 0, got {}", self.base_lr));
        }
        if !(self.min_lr.is_finite() && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            problems.push(format!("min_lr must lie in [0, base_lr], got {}", self.min_lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            problems.push(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn schedule(&self, total_steps: u64) -> Schedule {
        let warmup = self.warmup_steps.unwrap_or(total_steps / 10).min(total_steps);
        Schedule { base_lr: self.base_lr, min_lr: self.min_lr, warmup_steps: warmup, total_steps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr` at `total_steps`.
pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    let step = step.min(s.total_steps);
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps - s.warmup_steps;
    if span == 0 {
        return s.base_lr;
    }
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments plus the count of applied steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.entries.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    pub fn check(&self, params: &ParamStore) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .entries
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.shape() == p.tensor.shape() && v.shape() == p.tensor.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Model("optimizer moments do not match the parameter shapes".into()))
        }
    }
}

/// One AdamW update at learning rate `lr`. Parameters are untouched if any
/// gradient is non-finite.
pub fn adamw_apply(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    state.check(params)?;
    if grads.len() != params.len() {
        return Err(Error::Model(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (p, g) in params.entries.iter().zip(grads) {
        if g.shape() != p.tensor.shape() {
            return Err(Error::shape("adamw_apply", format!("{}: gradient {:?} vs {:?}", p.name, g.shape(), p.tensor.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { context: format!("gradient of {}", p.name) });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.entries.iter_mut().zip(grads).enumerate() {
        let shrink = if p.decay { 1.0 - lr * config.weight_decay } else { 1.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.tensor.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + config.eps);
            *w = *w * shrink - lr * update;
        }
        if !p.tensor.is_finite() {
            return Err(Error::NonFinite { context: format!("parameter {} after update", p.name) });
        }
    }
    Ok(())
}
