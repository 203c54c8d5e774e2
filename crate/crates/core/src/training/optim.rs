//! Triangular learning-rate schedule and Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OptimizerState, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig("clip_norm must be positive".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub peak_lr: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "need 0 < warmup_steps ({}) <= total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr >= 0.0) {
            return Err(Error::InvalidConfig("peak_lr must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear ramp from 0 to the peak over the warmup, then linear decay to 0
/// at `total_steps`, and 0 afterwards.
pub fn lr_at(sched: &ScheduleConfig, step: u64) -> f64 {
    let (w, t) = (sched.warmup_steps as f64, sched.total_steps as f64);
    let s = step as f64;
    if step <= sched.warmup_steps {
        // Ratio first, so the end of warmup is exactly the peak.
        sched.peak_lr * (s / w.max(1.0))
    } else if step >= sched.total_steps {
        0.0
    } else {
        sched.peak_lr * ((t - s) / (t - w))
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut Params<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}

/// One update: global-norm clipping, Adam with bias correction, then
/// decoupled weight decay on weight matrices and embeddings only.
/// Returns the pre-clip gradient norm.
pub fn optimizer_step(
    params: &mut Params<f32>,
    state: &mut OptimizerState,
    grads: &Params<f32>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<f64> {
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    let norm = grads.global_norm();
    let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let named_g = grads.named();
    let named_m = state.m.named_mut();
    let named_v = state.v.named_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in params
        .named_mut()
        .into_iter()
        .zip(named_g)
        .zip(named_m)
        .zip(named_v)
    {
        let decay = if Params::<f32>::role(&name).decays() {
            lr * cfg.weight_decay
        } else {
            0.0
        };
        for i in 0..p.data.len() {
            let gi = g.data[i] as f64 * clip;
            let mi = cfg.beta1 * m.data[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m.data[i] = mi as f32;
            v.data[i] = vi as f32;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            let theta = p.data[i] as f64;
            p.data[i] = (theta - lr * update - decay * theta) as f32;
        }
    }
    Ok(norm)
}
