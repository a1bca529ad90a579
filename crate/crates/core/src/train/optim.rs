use serde::{Deserialize, Serialize};

use super::TrainConfig;

/// Learning rate for 0-based `epoch`: `lr0` before the decay window, then
/// linear to zero at its end, zero afterwards.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let (start, end) = (cfg.decay_start(), cfg.decay_end());
    if epoch < start {
        cfg.lr0
    } else if epoch >= end {
        0.0
    } else {
        cfg.lr0 * (end - epoch) as f64 / (end - start) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step descending `grads`. There is no weight
/// decay. Entries with `mask[i] == false` are skipped entirely, moments
/// included.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig, mask: Option<&[bool]>) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Rescale `grads` so its L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if let Some(c) = max_norm {
        if norm > c {
            let s = c / norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
