//! ELBO training: schedule, optimizer, trainer loop and checkpoints.

mod checkpoint;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, TrainingState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{adam_step, clip_grad_norm, lr_at, AdamConfig, AdamState};
pub use trainer::{evaluate_elbo, EpochLog, EpochTiming, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Objective;

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub epochs: usize,
    /// Linear decay to zero starts here; defaults to `epochs / 2`.
    #[serde(default)]
    pub decay_start_epoch: Option<usize>,
    /// Learning rate reaches zero here; defaults to `epochs`.
    #[serde(default)]
    pub decay_end_epoch: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub objective: Objective,
    /// Monte-Carlo samples of the shape code per shape and step.
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_lr0() -> f64 {
    0.002
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    16
}
fn default_mc() -> usize {
    1
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        TrainConfig {
            lr0: default_lr0(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            epochs,
            decay_start_epoch: None,
            decay_end_epoch: None,
            batch_size: default_batch(),
            seed: 0,
            objective: Objective::Elbo,
            mc_samples: 1,
            grad_clip: None,
            checkpoint_every: 0,
        }
    }

    pub fn decay_start(&self) -> usize {
        self.decay_start_epoch.unwrap_or(self.epochs / 2)
    }

    pub fn decay_end(&self) -> usize {
        self.decay_end_epoch.unwrap_or(self.epochs)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.decay_start() <= self.decay_end() && self.decay_end() <= self.epochs) {
            return bad("need decay_start_epoch <= decay_end_epoch <= epochs");
        }
        if self.batch_size == 0 || self.mc_samples == 0 {
            return bad("batch_size and mc_samples must be at least 1");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }
}
