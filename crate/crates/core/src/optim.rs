//! AdamW with decoupled weight decay and a linear-warmup learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-5,
            weight_decay: 0.1,
            warmup_ratio: 0.03,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            batch_size: 16,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::Config(format!(
                "warmup_ratio must lie in (0,1), got {}",
                self.warmup_ratio
            )));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Number of warmup steps: `ceil(warmup_ratio * total_steps)`, at least one.
pub fn warmup_steps(total_steps: usize, cfg: &OptimizerConfig) -> usize {
    ((cfg.warmup_ratio * total_steps as f64).ceil() as usize).max(1)
}

/// Linear warmup from zero to `cfg.lr`, then constant. `step` is 1-based.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &OptimizerConfig) -> f64 {
    let warmup = warmup_steps(total_steps, cfg);
    if step >= warmup {
        cfg.lr
    } else {
        cfg.lr * step as f64 / warmup as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &OptimizerConfig, lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update using the gradient slots of `params`. Frozen parameters
/// are skipped entirely; a trainable parameter without a gradient is treated
/// as having a zero gradient.
pub fn adamw_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    hyper: &AdamHyper,
    step_count: usize,
) -> Result<()> {
    if step_count == 0 {
        return Err(Error::Config("step_count is 1-based".into()));
    }
    for p in params.iter() {
        if let (true, Some(g)) = (p.trainable, &p.value.grad) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
    }
    if state.moments.len() < params.len() {
        state.moments.resize(params.len(), None);
    }
    let t = step_count as i32;
    let bias1 = 1.0 - hyper.beta1.powi(t);
    let bias2 = 1.0 - hyper.beta2.powi(t);
    let decay = 1.0 - hyper.lr * hyper.weight_decay;
    for (p, slot) in params.iter_mut().zip(state.moments.iter_mut()) {
        if !p.trainable {
            continue;
        }
        let n = p.value.numel();
        let (m, v) = slot.get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let grad = p.value.grad.take();
        let data = p.value.data_mut();
        for i in 0..n {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] = data[i] * decay - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
        p.value.grad = grad;
    }
    Ok(())
}
