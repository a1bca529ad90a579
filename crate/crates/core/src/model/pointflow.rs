use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderConfig, PosteriorGaussian};
use crate::cnf::{standard_normal_log_prob, FlowTransform, SolverConfig, SolverMethod, TraceConfig};
use crate::error::{Error, Result};
use crate::flowcore::{param_join, DynamicsNet, MovingBatchNorm, ParamTensor, Parameterized};
use crate::rng::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Latent prior: a CNF over `z`, or a plain standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    #[default]
    Cnf,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    /// Fixed-step RK4 used for gradients.
    #[serde(default = "SolverConfig::training_default")]
    pub train: SolverConfig,
    /// Used for density evaluation, sampling and reconstruction.
    #[serde(default = "SolverConfig::eval_default")]
    pub eval: SolverConfig,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            train: SolverConfig::training_default(),
            eval: SolverConfig::eval_default(),
        }
    }
}

/// Which trace estimator each flow uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSettings {
    /// Probe count when the stochastic estimator is used.
    #[serde(default = "one")]
    pub hutchinson_samples: usize,
    /// Flows of at most this dimension use the exact trace in training.
    #[serde(default = "eight")]
    pub exact_max_dim: usize,
    /// Always use the exact trace outside training.
    #[serde(default = "yes")]
    pub exact_at_eval: bool,
}

fn one() -> usize {
    1
}
fn eight() -> usize {
    crate::cnf::EXACT_TRACE_MAX_DIM
}
fn yes() -> bool {
    true
}

impl Default for TraceSettings {
    fn default() -> Self {
        TraceSettings {
            hutchinson_samples: 1,
            exact_max_dim: eight(),
            exact_at_eval: true,
        }
    }
}

impl TraceSettings {
    pub fn train(&self, dim: usize) -> TraceConfig {
        if dim <= self.exact_max_dim {
            TraceConfig::exact()
        } else {
            TraceConfig::hutchinson(self.hutchinson_samples)
        }
    }

    pub fn eval(&self, dim: usize) -> TraceConfig {
        if self.exact_at_eval {
            TraceConfig::exact()
        } else {
            self.train(dim)
        }
    }
}

/// Model hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Point dimension.
    pub d: usize,
    /// Latent shape-code dimension.
    pub dz: usize,
    #[serde(default)]
    pub prior_mode: PriorMode,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_prior_hidden")]
    pub prior_hidden: Vec<usize>,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: Vec<usize>,
    /// Wrap both flows in moving batch norms.
    #[serde(default = "yes")]
    pub batch_norm: bool,
    /// Weight of each batch in the running statistics of the batch norms.
    #[serde(default = "default_momentum")]
    pub batch_norm_momentum: f64,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub trace: TraceSettings,
}

fn default_momentum() -> f64 {
    0.1
}

fn default_prior_hidden() -> Vec<usize> {
    vec![256, 256]
}

fn default_decoder_hidden() -> Vec<usize> {
    vec![512, 512, 512]
}

impl ModelConfig {
    pub fn new(d: usize, dz: usize) -> Self {
        ModelConfig {
            d,
            dz,
            prior_mode: PriorMode::Cnf,
            encoder: EncoderConfig::default(),
            prior_hidden: default_prior_hidden(),
            decoder_hidden: default_decoder_hidden(),
            batch_norm: true,
            batch_norm_momentum: default_momentum(),
            solver: SolverSettings::default(),
            trace: TraceSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.dz == 0 {
            return Err(Error::Config("d and dz must be positive".into()));
        }
        for (name, w) in [("prior_hidden", &self.prior_hidden), ("decoder_hidden", &self.decoder_hidden)] {
            if w.contains(&0) {
                return Err(Error::Config(format!("{name} widths must be positive")));
            }
        }
        if self.encoder.pointwise.is_empty() || self.encoder.pointwise.contains(&0) || self.encoder.head.contains(&0) {
            return Err(Error::Config("encoder widths must be positive and nonempty".into()));
        }
        if !(self.batch_norm_momentum > 0.0 && self.batch_norm_momentum <= 1.0) {
            return Err(Error::Config("batch_norm_momentum must lie in (0, 1]".into()));
        }
        if self.solver.train.method != SolverMethod::Rk4Fixed {
            return Err(Error::Config("the training solver must be rk4_fixed".into()));
        }
        self.solver.train.validate()?;
        self.solver.eval.validate()?;
        if self.trace.hutchinson_samples == 0 {
            return Err(Error::Config("hutchinson_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-shape ELBO decomposition; `elbo = l_prior + l_recon + l_ent`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub l_prior: f64,
    pub l_recon: f64,
    pub l_ent: f64,
    pub elbo: f64,
}

impl ElboBreakdown {
    pub fn new(l_prior: f64, l_recon: f64, l_ent: f64) -> Self {
        ElboBreakdown {
            l_prior,
            l_recon,
            l_ent,
            elbo: l_prior + l_recon + l_ent,
        }
    }
}

/// Encoder, latent prior flow and point decoder flow conditioned on the
/// latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFlowModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    /// Prior flow over shape codes; unused when `prior_mode` is gaussian.
    pub prior: FlowTransform,
    pub decoder: FlowTransform,
}

/// `z = mu + sigma * eps`.
pub fn reparameterize(post: &PosteriorGaussian, eps: ArrayView1<f64>) -> Array1<f64> {
    &post.mu + &(&post.sigma * &eps)
}

/// Draw `z = mu + sigma * eps` with `eps ~ N(0, I)`.
pub fn reparam_sample(post: &PosteriorGaussian, rng: &mut Rng) -> Array1<f64> {
    let eps = standard_normal_vec(post.dim(), rng);
    reparameterize(post, eps.view())
}

/// `n` independent standard-normal draws.
pub fn standard_normal_vec(n: usize, rng: &mut Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng))
}

/// Differential entropy of the diagonal Gaussian posterior.
pub fn posterior_entropy(post: &PosteriorGaussian) -> f64 {
    let dz = post.dim() as f64;
    0.5 * dz * (1.0 + LN_2PI) + post.sigma.iter().map(|s| s.ln()).sum::<f64>()
}

fn as_row(v: ArrayView1<f64>) -> ArrayView2<f64> {
    v.insert_axis(Axis(0))
}

impl PointFlowModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.d, config.dz, &config.encoder, rng)?;
        let mut prior = FlowTransform::new(DynamicsNet::new(config.dz, &config.prior_hidden, None, rng), config.batch_norm);
        let mut decoder = FlowTransform::new(
            DynamicsNet::new(config.d, &config.decoder_hidden, Some(config.dz), rng),
            config.batch_norm,
        );
        prior.solver = config.solver.eval.clone();
        prior.trace = config.trace.eval(config.dz);
        decoder.solver = config.solver.eval.clone();
        decoder.trace = config.trace.eval(config.d);
        for bn in [&mut prior.pre_norm, &mut prior.post_norm, &mut decoder.pre_norm, &mut decoder.post_norm]
            .into_iter()
            .flatten()
        {
            bn.momentum = config.batch_norm_momentum;
        }
        Ok(PointFlowModel {
            config,
            encoder,
            prior,
            decoder,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn dz(&self) -> usize {
        self.config.dz
    }

    fn check_cloud(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::contract("empty point cloud"));
        }
        if x.ncols() != self.d() {
            return Err(Error::contract(format!("cloud has dimension {}, model expects {}", x.ncols(), self.d())));
        }
        Ok(())
    }

    fn check_code(&self, z: &ArrayView1<f64>) -> Result<()> {
        if z.len() != self.dz() {
            return Err(Error::contract(format!("shape code has width {}, model expects {}", z.len(), self.dz())));
        }
        Ok(())
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<PosteriorGaussian> {
        self.check_cloud(&x)?;
        self.encoder.encode(x)
    }

    /// `sum_{x in X} log p(x | z)` under the decoder flow.
    pub fn recon_log_likelihood(&self, x: ArrayView2<f64>, z: ArrayView1<f64>, rng: &mut Rng) -> Result<f64> {
        self.recon_log_likelihood_with(x, z, &self.decoder.solver.clone(), rng)
    }

    pub fn recon_log_likelihood_with(
        &self,
        x: ArrayView2<f64>,
        z: ArrayView1<f64>,
        solver: &SolverConfig,
        rng: &mut Rng,
    ) -> Result<f64> {
        self.check_cloud(&x)?;
        self.check_code(&z)?;
        let z = z.to_vec();
        Ok(self.decoder.log_prob_with(x, Some(&z), solver, &self.decoder.trace, rng)?.sum())
    }

    pub fn prior_log_prob(&self, z: ArrayView1<f64>, rng: &mut Rng) -> Result<f64> {
        self.prior_log_prob_with(z, &self.prior.solver.clone(), rng)
    }

    pub fn prior_log_prob_with(&self, z: ArrayView1<f64>, solver: &SolverConfig, rng: &mut Rng) -> Result<f64> {
        self.check_code(&z)?;
        match self.config.prior_mode {
            PriorMode::Gaussian => Ok(standard_normal_log_prob(as_row(z))[0]),
            PriorMode::Cnf => Ok(self.prior.log_prob_with(as_row(z), None, solver, &self.prior.trace, rng)?[0]),
        }
    }

    /// Monte-Carlo ELBO with `mc_samples` reparameterized draws.
    pub fn elbo(&self, x: ArrayView2<f64>, rng: &mut Rng, mc_samples: usize) -> Result<ElboBreakdown> {
        if mc_samples == 0 {
            return Err(Error::contract("at least one Monte-Carlo sample is required"));
        }
        let eps: Vec<Array1<f64>> = (0..mc_samples).map(|_| standard_normal_vec(self.dz(), rng)).collect();
        self.elbo_with(x, &eps, &self.config.solver.eval.clone(), rng)
    }

    /// ELBO with given standard-normal draws `eps` and solver.
    pub fn elbo_with(
        &self,
        x: ArrayView2<f64>,
        eps: &[Array1<f64>],
        solver: &SolverConfig,
        rng: &mut Rng,
    ) -> Result<ElboBreakdown> {
        if eps.is_empty() {
            return Err(Error::contract("at least one Monte-Carlo sample is required"));
        }
        let post = self.encode(x)?;
        let (mut lp, mut lr) = (0.0, 0.0);
        for e in eps {
            self.check_code(&e.view())?;
            let z = reparameterize(&post, e.view());
            lp += self.prior_log_prob_with(z.view(), solver, rng)?;
            lr += self.recon_log_likelihood_with(x, z.view(), solver, rng)?;
        }
        let l = eps.len() as f64;
        Ok(ElboBreakdown::new(lp / l, lr / l, posterior_entropy(&post)))
    }

    /// Shape code from the prior: `F(w)` with `w ~ N(0, I)`.
    pub fn sample_shape(&self, rng: &mut Rng) -> Result<Array1<f64>> {
        let w = standard_normal_vec(self.dz(), rng);
        self.code_from_base(w.view())
    }

    /// Map a base-space vector through the prior flow.
    pub fn code_from_base(&self, w: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_code(&w)?;
        match self.config.prior_mode {
            PriorMode::Gaussian => Ok(w.to_owned()),
            PriorMode::Cnf => Ok(self.prior.push(as_row(w), None, &self.prior.solver)?.0.remove_axis(Axis(0))),
        }
    }

    /// Map a shape code back to the prior's base space.
    pub fn base_from_code(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_code(&z)?;
        match self.config.prior_mode {
            PriorMode::Gaussian => Ok(z.to_owned()),
            PriorMode::Cnf => Ok(self.prior.pull(as_row(z), None, &self.prior.solver)?.0.remove_axis(Axis(0))),
        }
    }

    /// `m` points drawn from the decoder conditioned on `z`.
    pub fn sample_points(&self, z: ArrayView1<f64>, m: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        self.check_code(&z)?;
        if m == 0 {
            return Err(Error::contract("point count must be at least 1"));
        }
        let y = Array2::from_shape_simple_fn((m, self.d()), || StandardNormal.sample(rng));
        let z = z.to_vec();
        Ok(self.decoder.push(y.view(), Some(&z), &self.decoder.solver)?.0)
    }

    /// Snapshots of the decoder path at `frames` uniform times in
    /// `[T0, t1]`. Draws exactly what [`sample_points`](Self::sample_points)
    /// draws, so the last frame is that sample up to solver tolerance.
    pub fn sample_trajectory(&self, z: ArrayView1<f64>, m: usize, frames: usize, rng: &mut Rng) -> Result<Vec<Array2<f64>>> {
        self.check_code(&z)?;
        if m == 0 || frames < 2 {
            return Err(Error::contract("need at least one point and two frames"));
        }
        let y = Array2::from_shape_simple_fn((m, self.d()), || StandardNormal.sample(rng));
        let (t0, t1) = (crate::cnf::T0, self.decoder.t1());
        let times: Vec<f64> = (0..frames)
            .map(|k| if k + 1 == frames { t1 } else { t0 + (t1 - t0) * k as f64 / (frames - 1) as f64 })
            .collect();
        let z = z.to_vec();
        self.decoder.trajectory(y.view(), Some(&z), &times, &self.decoder.solver)
    }

    /// Decode the posterior mean of `x` into `m` points.
    pub fn reconstruct(&self, x: ArrayView2<f64>, m: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        self.reconstruct_with(x, m, false, rng)
    }

    /// With `stochastic`, decode a posterior draw instead of the mean.
    pub fn reconstruct_with(&self, x: ArrayView2<f64>, m: usize, stochastic: bool, rng: &mut Rng) -> Result<Array2<f64>> {
        let post = self.encode(x)?;
        let z = if stochastic { reparam_sample(&post, rng) } else { post.mu };
        self.sample_points(z.view(), m, rng)
    }

    /// Restore parameter invariants after an update.
    pub fn project(&mut self) {
        self.prior.project();
        self.decoder.project();
    }

    /// Freeze or unfreeze running-statistic updates of every norm layer.
    pub fn set_norms_frozen(&mut self, frozen: bool) {
        for (_, bn) in self.norms_mut() {
            bn.frozen = frozen;
        }
    }

    /// Every norm layer with a stable name, in a fixed order.
    pub fn norms(&self) -> Vec<(&'static str, &MovingBatchNorm)> {
        let mut out = Vec::new();
        let named = [
            ("prior.pre_norm", &self.prior.pre_norm),
            ("prior.post_norm", &self.prior.post_norm),
            ("decoder.pre_norm", &self.decoder.pre_norm),
            ("decoder.post_norm", &self.decoder.post_norm),
        ];
        for (name, bn) in named {
            if let Some(bn) = bn {
                out.push((name, bn));
            }
        }
        out
    }

    pub fn norms_mut(&mut self) -> Vec<(&'static str, &mut MovingBatchNorm)> {
        let mut out = Vec::new();
        let named = [
            ("prior.pre_norm", &mut self.prior.pre_norm),
            ("prior.post_norm", &mut self.prior.post_norm),
            ("decoder.pre_norm", &mut self.decoder.pre_norm),
            ("decoder.post_norm", &mut self.decoder.post_norm),
        ];
        for (name, bn) in named {
            if let Some(bn) = bn.as_mut() {
                out.push((name, bn));
            }
        }
        out
    }
}

impl Parameterized for PointFlowModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.encoder.visit_params(&param_join(prefix, "encoder"), f);
        self.prior.visit_params(&param_join(prefix, "prior"), f);
        self.decoder.visit_params(&param_join(prefix, "decoder"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.encoder.visit_params_mut(&param_join(prefix, "encoder"), f);
        self.prior.visit_params_mut(&param_join(prefix, "prior"), f);
        self.decoder.visit_params_mut(&param_join(prefix, "decoder"), f);
    }
}
