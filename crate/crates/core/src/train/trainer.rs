use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingState};
use super::optim::{adam_step, clip_grad_norm, lr_at, AdamState};
use super::TrainConfig;
use crate::data::{CloudSet, NormalizationStats};
use crate::error::{Error, Result};
use crate::flowcore::Parameterized;
use crate::model::{standard_normal_vec, ElboBreakdown, Objective, PointFlowModel};
use crate::rng::{Rng, RngState};

/// One line of the training log. Deterministic given config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Number of completed epochs, starting at 1.
    pub epoch: usize,
    pub lr: f64,
    pub l_prior: f64,
    pub l_recon: f64,
    pub l_ent: f64,
    pub elbo: f64,
    /// Dynamics evaluations spent in forward solves.
    pub evals: usize,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_steps: usize,
}

/// Wall-clock time of one epoch, kept apart from [`EpochLog`] so that the
/// log itself stays reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub seconds: f64,
}

/// Single-writer training loop over a model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: PointFlowModel,
    pub config: TrainConfig,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Data normalization, carried into checkpoints.
    pub normalization: Option<NormalizationStats>,
    rng: Rng,
    mask: Vec<bool>,
}

/// `false` for parameters the objective must not touch.
fn update_mask(model: &PointFlowModel, objective: Objective) -> Vec<bool> {
    let mut mask = Vec::with_capacity(model.num_params());
    model.visit_params("", &mut |name, p| {
        let frozen = !p.requires_grad || (objective == Objective::ReconOnly && name.starts_with("prior."));
        mask.extend(std::iter::repeat_n(!frozen, p.len()));
    });
    mask
}

impl Trainer {
    pub fn new(model: PointFlowModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mask = update_mask(&model, config.objective);
        Ok(Trainer {
            adam: AdamState::new(model.num_params()),
            rng: crate::rng::seeded(config.seed),
            model,
            config,
            epoch: 0,
            normalization: None,
            mask,
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// One pass over `data` in a seeded shuffled order.
    pub fn run_epoch(&mut self, data: &CloudSet) -> Result<EpochLog> {
        if data.dim() != self.model.d() {
            return Err(Error::contract("dataset dimension does not match the model"));
        }
        let lr = lr_at(self.epoch, &self.config);
        let adam_cfg = self.config.adam();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);

        let mut sum = ElboBreakdown::default();
        let (mut evals, mut norm_sum, mut clipped, mut steps) = (0, 0.0, 0, 0);
        for batch in order.chunks(self.config.batch_size) {
            let views: Vec<_> = batch.iter().map(|&i| data[i].view()).collect();
            let counts: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
            let noise = self.model.draw_noise(&counts, self.config.mc_samples, &mut self.rng);
            let out = self
                .model
                .elbo_grad(&views, &noise, self.config.objective, 1.0 / batch.len() as f64)?;
            for b in &out.breakdowns {
                if !b.elbo.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "ELBO terms prior {} recon {} entropy {} in epoch {}",
                        b.l_prior,
                        b.l_recon,
                        b.l_ent,
                        self.epoch + 1
                    )));
                }
                sum.l_prior += b.l_prior;
                sum.l_recon += b.l_recon;
                sum.l_ent += b.l_ent;
                sum.elbo += b.elbo;
            }
            // Ascend the objective by descending its negation.
            let mut g: Vec<f64> = out.grad.flatten().iter().zip(&self.mask).map(|(v, &m)| if m { -v } else { 0.0 }).collect();
            let norm = clip_grad_norm(&mut g, self.config.grad_clip);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient norm in epoch {}", self.epoch + 1)));
            }
            if self.config.grad_clip.is_some_and(|c| norm > c) {
                clipped += 1;
            }
            let mut p = self.model.flatten();
            adam_step(&mut p, &g, &mut self.adam, lr, &adam_cfg, Some(&self.mask));
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters after step in epoch {}", self.epoch + 1)));
            }
            self.model.unflatten(&p)?;
            self.model.project();
            self.model.apply_moments(&out.moments);
            evals += out.evals;
            norm_sum += norm;
            steps += 1;
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            lr,
            l_prior: sum.l_prior / n,
            l_recon: sum.l_recon / n,
            l_ent: sum.l_ent / n,
            elbo: sum.elbo / n,
            evals,
            grad_norm: norm_sum / steps as f64,
            clipped_steps: clipped,
        })
    }

    /// Train up to `config.epochs`, writing `train_log.jsonl`,
    /// `timing.jsonl` and checkpoints into `out_dir` when given. A numerical
    /// failure writes `diagnostic.ckpt` with the state at the failure.
    pub fn fit(&mut self, data: &CloudSet, out_dir: Option<&Path>) -> Result<Vec<EpochLog>> {
        self.fit_with(data, out_dir, &mut |_, _| Ok(()))
    }

    /// As [`fit`](Self::fit), calling `on_epoch` after every epoch.
    pub fn fit_with(
        &mut self,
        data: &CloudSet,
        out_dir: Option<&Path>,
        on_epoch: &mut dyn FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            if self.epoch == 0 {
                fs::write(dir.join("train_log.jsonl"), "")?;
                fs::write(dir.join("timing.jsonl"), "")?;
            }
        }
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let started = Instant::now();
            let log = match self.run_epoch(data) {
                Ok(log) => log,
                Err(e) => {
                    if let (Some(dir), true) = (out_dir, e.is_numerical()) {
                        let path = dir.join("diagnostic.ckpt");
                        match self.checkpoint().save(&path) {
                            Ok(()) => log::error!("numerical failure; state written to {}", path.display()),
                            Err(w) => log::error!("numerical failure; diagnostic checkpoint failed: {w}"),
                        }
                    }
                    return Err(e);
                }
            };
            let seconds = started.elapsed().as_secs_f64();
            log::info!(
                "epoch {} elbo {:.4} (prior {:.4} recon {:.4} ent {:.4}) lr {:.2e} {:.1}s",
                log.epoch,
                log.elbo,
                log.l_prior,
                log.l_recon,
                log.l_ent,
                log.lr,
                seconds
            );
            if let Some(dir) = out_dir {
                append_line(&dir.join("train_log.jsonl"), &serde_json::to_string(&log)?)?;
                let timing = EpochTiming { epoch: log.epoch, seconds };
                append_line(&dir.join("timing.jsonl"), &serde_json::to_string(&timing)?)?;
                let k = self.config.checkpoint_every;
                if k > 0 && log.epoch % k == 0 {
                    self.checkpoint().save(dir.join(format!("checkpoint_{:05}.ckpt", log.epoch)))?;
                }
            }
            on_epoch(self, &log)?;
            logs.push(log);
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(dir.join("final.ckpt"))?;
        }
        Ok(logs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            normalization: self.normalization.clone(),
            training: Some(TrainingState {
                config: self.config.clone(),
                epoch: self.epoch,
                rng: self.rng_state(),
                adam: self.adam.clone(),
            }),
        }
    }

    /// Resume exactly where the checkpointed run stopped.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let state = ckpt
            .training
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let rng = state
            .rng
            .restore()
            .ok_or_else(|| Error::Checkpoint("malformed generator state".into()))?;
        if state.adam.m.len() != ckpt.model.num_params() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        state.config.validate()?;
        let mask = update_mask(&ckpt.model, state.config.objective);
        Ok(Trainer {
            model: ckpt.model,
            config: state.config,
            adam: state.adam,
            epoch: state.epoch,
            normalization: ckpt.normalization,
            rng,
            mask,
        })
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Mean ELBO terms over a set with the training solver and the model's
/// evaluation trace. Shape `i` draws its noise from stream `i` of `seed`.
pub fn evaluate_elbo(model: &PointFlowModel, data: &CloudSet, mc_samples: usize, seed: u64) -> Result<ElboBreakdown> {
    let per_shape = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::rng::derived(seed, i as u64);
            let eps: Vec<_> = (0..mc_samples).map(|_| standard_normal_vec(model.dz(), &mut rng)).collect();
            model.elbo_with(data[i].view(), &eps, &model.config.solver.train, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_shape.len() as f64;
    let mut acc = ElboBreakdown::default();
    for b in &per_shape {
        acc.l_prior += b.l_prior / n;
        acc.l_recon += b.l_recon / n;
        acc.l_ent += b.l_ent / n;
        acc.elbo += b.elbo / n;
    }
    Ok(acc)
}
