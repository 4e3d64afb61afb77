//! Optimizers (Adam and LAMB), gradient clipping, cosine schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::fit::ParamStore;
use crate::tensor::{Gradients, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptMode {
    Adam,
    Lamb,
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub mode: OptMode,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// LAMB trust-ratio clamp upper bound.
    pub trust_clamp: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            mode: OptMode::Lamb,
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_steps: 100,
            total_steps: 1000,
            trust_clamp: 10.0,
        }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
pub struct OptimizerState {
    pub mode: OptMode,
    pub step: u64,
    pub m: HashMap<String, Vec<f32>>,
    pub v: HashMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(mode: OptMode) -> Self {
        OptimizerState {
            mode,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then a half-cosine decay to
/// zero at `total`.
pub fn cosine_lr(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let step = step.min(total);
    if warmup > 0 && step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let frac = (step - warmup) as f64 / span;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

pub struct UpdateStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Norm after clipping (<= grad_clip).
    pub clipped_norm: f64,
}

/// Apply one optimizer step. Gradients are clipped by global norm first;
/// Adam applies the bias-corrected moment update, LAMB rescales each
/// parameter tensor's update by the trust ratio `||w|| / ||u + wd w||`
/// (clamped, and treated as 1 when either norm vanishes).
pub fn optimizer_update(
    params: &mut ParamStore<f32>,
    grads: &Gradients<f32>,
    lr: f64,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<UpdateStats> {
    let names: Vec<String> = params.names().to_vec();
    // Every parameter must have a gradient (the loss must touch the whole
    // network; a missing gradient is a wiring bug, not a soft condition).
    let mut sq_sum = 0.0f64;
    for name in &names {
        let p = params.get(name)?;
        let g = grads.get(p).ok_or_else(|| {
            Error::Train(format!("missing gradient for parameter `{name}`"))
        })?;
        sq_sum += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
    }
    let grad_norm = sq_sum.sqrt();
    let clip_factor = if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        cfg.grad_clip / grad_norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - cfg.beta1.powf(t);
    let bias2 = 1.0 - cfg.beta2.powf(t);

    for name in &names {
        let p = params.get(name)?.clone();
        let g = grads.get(&p).unwrap();
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);

        let mut update = vec![0.0f32; n];
        for i in 0..n {
            let gi = g[i] * clip_factor as f32;
            m[i] = (cfg.beta1 as f32) * m[i] + (1.0 - cfg.beta1 as f32) * gi;
            v[i] = (cfg.beta2 as f32) * v[i] + (1.0 - cfg.beta2 as f32) * gi * gi;
            let m_hat = m[i] / bias1 as f32;
            let v_hat = v[i] / bias2 as f32;
            update[i] = m_hat / (v_hat.sqrt() + cfg.eps as f32)
                + cfg.weight_decay as f32 * p.data()[i];
        }

        let scale = match state.mode {
            OptMode::Adam => lr,
            OptMode::Lamb => {
                let w_norm = p
                    .data()
                    .iter()
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>()
                    .sqrt();
                let u_norm = update
                    .iter()
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>()
                    .sqrt();
                let trust = if w_norm == 0.0 || u_norm == 0.0 {
                    1.0
                } else {
                    (w_norm / u_norm).clamp(0.0, cfg.trust_clamp)
                };
                lr * trust
            }
        };

        let new_data: Vec<f32> = p
            .data()
            .iter()
            .zip(&update)
            .map(|(&w, &u)| w - (scale as f32) * u)
            .collect();
        params.set(name, Tensor::var(new_data, p.shape())?)?;
    }

    Ok(UpdateStats {
        grad_norm,
        clipped_norm: grad_norm * clip_factor,
    })
}
