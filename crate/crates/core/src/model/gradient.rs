use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::Encoder;
use super::pointflow::{posterior_entropy, reparameterize, standard_normal_vec, ElboBreakdown, PointFlowModel, PriorMode};
use crate::cnf::standard_normal_log_prob;
use crate::error::{Error, Result};
use crate::flowcore::{BatchMoments, Parameterized, Probes};
use crate::rng::Rng;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Full ELBO: prior + reconstruction + entropy.
    #[default]
    Elbo,
    /// Reconstruction likelihood only; the prior flow receives no gradient.
    ReconOnly,
}

/// Random draws for one shape of a batch.
#[derive(Debug, Clone)]
pub struct ShapeNoise {
    /// One standard-normal vector per Monte-Carlo sample.
    pub eps: Vec<Array1<f64>>,
    /// Decoder trace probes, one set per Monte-Carlo sample.
    pub decoder_probes: Vec<Probes>,
}

/// All random draws consumed by one gradient evaluation. Drawn up front,
/// in a fixed order, so that parallel evaluation stays deterministic.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    pub shapes: Vec<ShapeNoise>,
    /// Prior trace probes for the stacked codes (shape-major).
    pub prior_probes: Probes,
}

/// Batch statistics seen by each norm layer during a gradient evaluation.
#[derive(Debug, Clone, Default)]
pub struct NormMoments {
    pub prior_pre: Option<BatchMoments>,
    pub prior_post: Option<BatchMoments>,
    pub decoder_pre: Option<BatchMoments>,
    pub decoder_post: Option<BatchMoments>,
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub breakdowns: Vec<ElboBreakdown>,
    /// Gradient of `scale * sum_i objective_i`, laid out like the model.
    pub grad: PointFlowModel,
    pub moments: NormMoments,
    /// Dynamics evaluations spent in the forward solves.
    pub evals: usize,
}

fn merge(a: Option<BatchMoments>, b: Option<BatchMoments>) -> Option<BatchMoments> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.merge(&b)),
        (a, b) => a.or(b),
    }
}

impl PointFlowModel {
    /// Draw the noise for a batch whose shapes have the given point counts.
    pub fn draw_noise(&self, point_counts: &[usize], mc_samples: usize, rng: &mut Rng) -> BatchNoise {
        let dec_trace = self.config.trace.train(self.d());
        let shapes = point_counts
            .iter()
            .map(|&m| {
                let mut eps = Vec::with_capacity(mc_samples);
                let mut decoder_probes = Vec::with_capacity(mc_samples);
                for _ in 0..mc_samples {
                    eps.push(standard_normal_vec(self.dz(), rng));
                    decoder_probes.push(dec_trace.probes(m, self.d(), rng));
                }
                ShapeNoise { eps, decoder_probes }
            })
            .collect();
        let prior_probes = match self.config.prior_mode {
            PriorMode::Cnf => self
                .config
                .trace
                .train(self.dz())
                .probes(point_counts.len() * mc_samples, self.dz(), rng),
            PriorMode::Gaussian => Probes::none(),
        };
        BatchNoise { shapes, prior_probes }
    }

    /// Per-shape ELBO terms through the training RK4 solver, and the
    /// gradient of `scale * sum_i` (ELBO or reconstruction term) with
    /// respect to every parameter.
    pub fn elbo_grad(
        &self,
        shapes: &[ArrayView2<f64>],
        noise: &BatchNoise,
        objective: Objective,
        scale: f64,
    ) -> Result<BatchGradient> {
        let b = shapes.len();
        if b == 0 || noise.shapes.len() != b {
            return Err(Error::contract("need one noise entry per shape and at least one shape"));
        }
        let l = noise.shapes[0].eps.len();
        if l == 0 || noise.shapes.iter().any(|s| s.eps.len() != l || s.decoder_probes.len() != l) {
            return Err(Error::contract("every shape needs the same positive number of draws"));
        }
        let steps = self.config.solver.train.fixed_steps;
        let w = scale / l as f64;

        let encoded = shapes
            .par_iter()
            .map(|x| {
                if x.ncols() != self.d() {
                    return Err(Error::contract("cloud dimension does not match the model"));
                }
                self.encoder.forward(*x)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut codes = Array2::zeros((b * l, self.dz()));
        for (i, (post, _)) in encoded.iter().enumerate() {
            for (k, e) in noise.shapes[i].eps.iter().enumerate() {
                codes.row_mut(i * l + k).assign(&reparameterize(post, e.view()));
            }
        }

        let mut grad = self.zeros_like();
        let mut moments = NormMoments::default();
        let mut evals = 0;
        let (prior_lp, g_codes) = match (self.config.prior_mode, objective) {
            (PriorMode::Gaussian, _) => {
                let lp = standard_normal_log_prob(codes.view());
                let g = match objective {
                    Objective::Elbo => codes.mapv(|v| -v * w),
                    Objective::ReconOnly => Array2::zeros(codes.raw_dim()),
                };
                (lp, g)
            }
            (PriorMode::Cnf, Objective::Elbo) => {
                let weights = Array1::from_elem(b * l, w);
                let out = self.prior.log_prob_grad(
                    codes.view(),
                    None,
                    steps,
                    &noise.prior_probes,
                    weights.view(),
                    &mut grad.prior,
                    true,
                )?;
                moments.prior_post = out.post_moments;
                moments.prior_pre = out.pre_moments;
                evals += 4 * steps;
                (out.log_prob, out.g_x)
            }
            (PriorMode::Cnf, Objective::ReconOnly) => {
                let lp = self
                    .prior
                    .log_prob_with_probes(codes.view(), None, &self.config.solver.train, &noise.prior_probes)?;
                evals += 4 * steps;
                (lp, Array2::zeros(codes.raw_dim()))
            }
        };

        // Decoder terms, one task per (shape, draw).
        let tasks: Vec<(usize, usize)> = (0..b).flat_map(|i| (0..l).map(move |k| (i, k))).collect();
        let decoded = tasks
            .par_iter()
            .map(|&(i, k)| -> Result<_> {
                let x = shapes[i];
                let z = codes.row(i * l + k).to_vec();
                let mut g = self.decoder.zeros_like();
                let weights = Array1::from_elem(x.nrows(), w);
                let out = self.decoder.log_prob_grad(
                    x,
                    Some(&z),
                    steps,
                    &noise.shapes[i].decoder_probes[k],
                    weights.view(),
                    &mut g,
                    true,
                )?;
                Ok((out.log_prob.sum(), out.g_z.expect("decoder is conditional"), g, out.post_moments, out.pre_moments))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut recon = vec![0.0; b];
        let mut g_codes = g_codes;
        for (&(i, k), (lp, gz, g, post_m, pre_m)) in tasks.iter().zip(decoded) {
            recon[i] += lp / l as f64;
            g_codes.row_mut(i * l + k).iter_mut().zip(&gz).for_each(|(a, b)| *a += b);
            add_into(&mut grad.decoder, &g);
            moments.decoder_post = merge(moments.decoder_post.take(), post_m);
            moments.decoder_pre = merge(moments.decoder_pre.take(), pre_m);
            evals += 4 * steps;
        }

        let entropy_weight = match objective {
            Objective::Elbo => scale,
            Objective::ReconOnly => 0.0,
        };
        let enc_grads = (0..b)
            .into_par_iter()
            .map(|i| {
                let (post, cache) = &encoded[i];
                let mut g_mu = Array1::zeros(self.dz());
                let mut g_ls = Array1::from_elem(self.dz(), entropy_weight);
                for (k, e) in noise.shapes[i].eps.iter().enumerate() {
                    let gz = g_codes.row(i * l + k);
                    g_mu += &gz;
                    g_ls += &(&gz * e * &post.sigma);
                }
                let mut g = self.encoder.zeros_like();
                self.encoder.backward(cache, g_mu.view(), g_ls.view(), &mut g);
                g
            })
            .collect::<Vec<Encoder>>();
        for g in &enc_grads {
            add_into(&mut grad.encoder, g);
        }

        let breakdowns = (0..b)
            .map(|i| {
                let lp = prior_lp.slice(ndarray::s![i * l..(i + 1) * l]).sum() / l as f64;
                ElboBreakdown::new(lp, recon[i], posterior_entropy(&encoded[i].0))
            })
            .collect();
        Ok(BatchGradient {
            breakdowns,
            grad,
            moments,
            evals,
        })
    }

    /// Fold batch moments from [`elbo_grad`](Self::elbo_grad) into the
    /// running statistics of the (unfrozen) norm layers.
    pub fn apply_moments(&mut self, m: &NormMoments) {
        self.prior.update_running_stats(m.prior_post.as_ref(), m.prior_pre.as_ref());
        self.decoder.update_running_stats(m.decoder_post.as_ref(), m.decoder_pre.as_ref());
    }
}

fn add_into<P: Parameterized>(acc: &mut P, g: &P) {
    let src = g.flatten();
    let mut offset = 0;
    acc.visit_params_mut("", &mut |_, p| {
        let n = p.len();
        p.values_mut().iter_mut().zip(&src[offset..offset + n]).for_each(|(a, b)| *a += b);
        offset += n;
    });
}
