use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::solver::{integrate_augmented, rk4, rk4_backward, Rhs, SolverConfig, SolverMethod};
use super::trace::TraceConfig;
use crate::error::{Error, Result};
use crate::flowcore::{BatchMoments, DynamicsNet, MovingBatchNorm, ParamTensor, Parameterized, Probes};
use crate::rng::Rng;

/// Start of the integration interval; fixed.
pub const T0: f64 = 0.0;
/// `t1` is kept at least this far above [`T0`].
pub const MIN_INTEGRATION_TIME: f64 = 1e-3;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Standard normal log-density of every row.
pub fn standard_normal_log_prob(y: ArrayView2<f64>) -> Array1<f64> {
    let d = y.ncols() as f64;
    y.map_axis(Axis(1), |row| -0.5 * row.dot(&row) - 0.5 * d * LN_2PI)
}

/// A continuous normalizing flow between a standard normal base (at `t0`)
/// and data space (at `t1`), optionally wrapped in moving batch norms.
///
/// Generative direction: `y0 -> pre_norm^-1 -> ODE t0..t1 -> post_norm^-1 -> x`.
/// Density direction is the exact reverse, where the norms normalize.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTransform {
    pub dynamics: DynamicsNet,
    pub pre_norm: Option<MovingBatchNorm>,
    pub post_norm: Option<MovingBatchNorm>,
    /// Learnable end time, a one-element tensor.
    pub t1: ParamTensor,
    pub solver: SolverConfig,
    pub trace: TraceConfig,
}

/// Output of a flow traversal. `delta_logp` is `log p(output) - log p(input)`
/// per row: the accumulated `-integral Tr(df/dy) dt` along the traversal
/// direction plus `-log|det|` of every normalization applied.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub output: Array2<f64>,
    pub delta_logp: Array1<f64>,
    pub evals: usize,
}

/// Log-density and gradients from [`FlowTransform::log_prob_grad`].
#[derive(Debug, Clone)]
pub struct LogProbGrad {
    pub log_prob: Array1<f64>,
    pub g_x: Array2<f64>,
    pub g_z: Option<Vec<f64>>,
    /// Batch moments seen by the data-side norm, for running-stat updates.
    pub post_moments: Option<BatchMoments>,
    /// Batch moments seen by the base-side norm.
    pub pre_moments: Option<BatchMoments>,
}

impl FlowTransform {
    pub fn new(dynamics: DynamicsNet, with_norm: bool) -> Self {
        let dim = dynamics.dim();
        FlowTransform {
            pre_norm: with_norm.then(|| MovingBatchNorm::new(dim)),
            post_norm: with_norm.then(|| MovingBatchNorm::new(dim)),
            dynamics,
            t1: ParamTensor::filled(&[1], 1.0),
            solver: SolverConfig::eval_default(),
            trace: TraceConfig::auto(dim, 64),
        }
    }

    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn t1(&self) -> f64 {
        self.t1.scalar()
    }

    pub fn set_t1(&mut self, t1: f64) -> Result<()> {
        if !(t1 >= T0 + MIN_INTEGRATION_TIME) {
            return Err(Error::contract(format!("t1 = {t1} must be at least {}", T0 + MIN_INTEGRATION_TIME)));
        }
        self.t1.values_mut()[0] = t1;
        Ok(())
    }

    /// Restore invariants after a parameter update: `t1` floor and `|gamma|` floors.
    pub fn project(&mut self) {
        let t1 = &mut self.t1.values_mut()[0];
        *t1 = t1.max(T0 + MIN_INTEGRATION_TIME);
        for bn in self.pre_norm.iter_mut().chain(self.post_norm.iter_mut()) {
            bn.project();
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::contract(format!(
                "flow input has width {}, flow dimension is {}",
                x.ncols(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, y0: ArrayView2<f64>, z: Option<&[f64]>, rng: &mut Rng) -> Result<FlowResult> {
        self.forward_with(y0, z, &self.solver, &self.trace, rng)
    }

    /// Transport base samples to data space.
    pub fn forward_with(
        &self,
        y0: ArrayView2<f64>,
        z: Option<&[f64]>,
        solver: &SolverConfig,
        trace: &TraceConfig,
        rng: &mut Rng,
    ) -> Result<FlowResult> {
        self.check_input(&y0)?;
        let n = y0.nrows();
        let mut delta = Array1::zeros(n);
        let mut y = match &self.pre_norm {
            Some(bn) => {
                let (v, ld) = bn.inverse(y0)?;
                delta -= ld;
                v
            }
            None => y0.to_owned(),
        };
        let probes = trace.probes(n, self.dim(), rng);
        let sol = integrate_augmented(&self.dynamics, y.view(), T0, self.t1(), z, &probes, solver)?;
        delta += &sol.log_density_change;
        y = sol.state;
        if let Some(bn) = &self.post_norm {
            let (v, ld) = bn.inverse(y.view())?;
            delta -= ld;
            y = v;
        }
        Ok(FlowResult {
            output: y,
            delta_logp: delta,
            evals: sol.evals,
        })
    }

    /// Generative direction without density bookkeeping; returns the
    /// output and the number of dynamics evaluations.
    pub fn push(&self, y0: ArrayView2<f64>, z: Option<&[f64]>, solver: &SolverConfig) -> Result<(Array2<f64>, usize)> {
        self.check_input(&y0)?;
        let y = match &self.pre_norm {
            Some(bn) => bn.inverse(y0)?.0,
            None => y0.to_owned(),
        };
        let (y, evals) = super::solver::integrate(&self.dynamics, y.view(), T0, self.t1(), z, solver)?;
        let y = match &self.post_norm {
            Some(bn) => bn.inverse(y.view())?.0,
            None => y,
        };
        Ok((y, evals))
    }

    /// Density direction without density bookkeeping.
    pub fn pull(&self, x: ArrayView2<f64>, z: Option<&[f64]>, solver: &SolverConfig) -> Result<(Array2<f64>, usize)> {
        self.check_input(&x)?;
        let y = match &self.post_norm {
            Some(bn) => bn.forward_eval(x)?.0,
            None => x.to_owned(),
        };
        let (y, evals) = super::solver::integrate(&self.dynamics, y.view(), self.t1(), T0, z, solver)?;
        let y = match &self.pre_norm {
            Some(bn) => bn.forward_eval(y.view())?.0,
            None => y,
        };
        Ok((y, evals))
    }

    pub fn inverse(&self, x: ArrayView2<f64>, z: Option<&[f64]>, rng: &mut Rng) -> Result<FlowResult> {
        self.inverse_with(x, z, &self.solver, &self.trace, rng)
    }

    /// Transport data back to the base distribution.
    pub fn inverse_with(
        &self,
        x: ArrayView2<f64>,
        z: Option<&[f64]>,
        solver: &SolverConfig,
        trace: &TraceConfig,
        rng: &mut Rng,
    ) -> Result<FlowResult> {
        self.check_input(&x)?;
        let n = x.nrows();
        let mut delta = Array1::zeros(n);
        let mut y = match &self.post_norm {
            Some(bn) => {
                let (v, ld) = bn.forward_eval(x)?;
                delta -= ld;
                v
            }
            None => x.to_owned(),
        };
        let probes = trace.probes(n, self.dim(), rng);
        let sol = integrate_augmented(&self.dynamics, y.view(), self.t1(), T0, z, &probes, solver)?;
        delta += &sol.log_density_change;
        y = sol.state;
        if let Some(bn) = &self.pre_norm {
            let (v, ld) = bn.forward_eval(y.view())?;
            delta -= ld;
            y = v;
        }
        Ok(FlowResult {
            output: y,
            delta_logp: delta,
            evals: sol.evals,
        })
    }

    pub fn log_prob(&self, x: ArrayView2<f64>, z: Option<&[f64]>, rng: &mut Rng) -> Result<Array1<f64>> {
        self.log_prob_with(x, z, &self.solver, &self.trace, rng)
    }

    /// `log p(x) = log N(F^-1(x); 0, I) - delta_logp(F^-1)` per row.
    pub fn log_prob_with(
        &self,
        x: ArrayView2<f64>,
        z: Option<&[f64]>,
        solver: &SolverConfig,
        trace: &TraceConfig,
        rng: &mut Rng,
    ) -> Result<Array1<f64>> {
        let probes = trace.probes(x.nrows(), self.dim(), rng);
        self.log_prob_with_probes(x, z, solver, &probes)
    }

    /// As [`log_prob_with`](Self::log_prob_with) with caller-supplied probes.
    pub fn log_prob_with_probes(
        &self,
        x: ArrayView2<f64>,
        z: Option<&[f64]>,
        solver: &SolverConfig,
        probes: &Probes,
    ) -> Result<Array1<f64>> {
        self.check_input(&x)?;
        let mut delta = Array1::zeros(x.nrows());
        let mut y = match &self.post_norm {
            Some(bn) => {
                let (v, ld) = bn.forward_eval(x)?;
                delta -= ld;
                v
            }
            None => x.to_owned(),
        };
        let sol = integrate_augmented(&self.dynamics, y.view(), self.t1(), T0, z, probes, solver)?;
        delta += &sol.log_density_change;
        y = sol.state;
        if let Some(bn) = &self.pre_norm {
            let (v, ld) = bn.forward_eval(y.view())?;
            delta -= ld;
            y = v;
        }
        Ok(standard_normal_log_prob(y.view()) - &delta)
    }

    /// Log-density through a fixed-step RK4 solve together with the
    /// gradient of `sum_r weights[r] * log p(x_r)`.
    ///
    /// Normalization layers use their running statistics as constants; when
    /// `collect_moments` is set the batch moments of their inputs are
    /// returned so the caller can fold them into the running averages.
    #[allow(clippy::too_many_arguments)]
    pub fn log_prob_grad(
        &self,
        x: ArrayView2<f64>,
        z: Option<&[f64]>,
        steps: usize,
        probes: &Probes,
        weights: ArrayView1<f64>,
        grad: &mut FlowTransform,
        collect_moments: bool,
    ) -> Result<LogProbGrad> {
        self.check_input(&x)?;
        let n = x.nrows();
        if weights.len() != n {
            return Err(Error::contract("one weight per row is required"));
        }
        if steps == 0 {
            return Err(Error::contract("RK4 needs at least one step"));
        }
        let moments = |bn: &MovingBatchNorm, v: ArrayView2<f64>| -> Result<Option<BatchMoments>> {
            if collect_moments && !bn.frozen && v.nrows() >= 2 {
                Ok(Some(BatchMoments::of(v)?))
            } else {
                Ok(None)
            }
        };

        let mut logdet = 0.0;
        let mut post_moments = None;
        let u = match &self.post_norm {
            Some(bn) => {
                post_moments = moments(bn, x)?;
                let (u, ld) = bn.forward_eval(x)?;
                logdet += ld;
                u
            }
            None => x.to_owned(),
        };
        let rhs = Rhs {
            dynamics: &self.dynamics,
            z,
            probes,
        };
        let mut record = Vec::with_capacity(steps);
        let sol = rk4(&rhs, u.view(), self.t1(), T0, steps, Some(&mut record))?;
        let v = sol.state;
        let mut pre_moments = None;
        let y0 = match &self.pre_norm {
            Some(bn) => {
                pre_moments = moments(bn, v.view())?;
                let (y0, ld) = bn.forward_eval(v.view())?;
                logdet += ld;
                y0
            }
            None => v.clone(),
        };
        let log_prob = standard_normal_log_prob(y0.view()) + logdet - &sol.log_density_change;
        if log_prob.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log-density".into()));
        }

        // Reverse pass.
        let sum_w = weights.sum();
        let mut g_y0 = y0.clone();
        for (mut row, &w) in g_y0.axis_iter_mut(Axis(0)).zip(weights.iter()) {
            row.mapv_inplace(|v| -v * w);
        }
        let g_v = match (&self.pre_norm, grad.pre_norm.as_mut()) {
            (Some(bn), Some(g)) => bn.backward(v.view(), g_y0.view(), sum_w, g),
            _ => g_y0,
        };
        let g_acc = weights.mapv(|w| -w);
        let mut g_z = z.map(|z| vec![0.0; z.len()]);
        let (g_u, g_t_start, _) = rk4_backward(
            &rhs,
            &record,
            self.t1(),
            T0,
            g_v,
            &g_acc,
            &mut grad.dynamics,
            g_z.as_deref_mut(),
        )?;
        grad.t1.values_mut()[0] += g_t_start;
        let g_x = match (&self.post_norm, grad.post_norm.as_mut()) {
            (Some(bn), Some(g)) => bn.backward(x, g_u.view(), sum_w, g),
            _ => g_u,
        };
        Ok(LogProbGrad {
            log_prob,
            g_x,
            g_z,
            post_moments,
            pre_moments,
        })
    }

    /// States along the generative direction at each of `times` (which must
    /// lie in `[t0, t1]` and be nondecreasing), mapped through the data-side
    /// norm so the frame at `t1` is a sample.
    pub fn trajectory(
        &self,
        y0: ArrayView2<f64>,
        z: Option<&[f64]>,
        times: &[f64],
        solver: &SolverConfig,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_input(&y0)?;
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::contract("trajectory times must be nondecreasing"));
        }
        let mut y = match &self.pre_norm {
            Some(bn) => bn.inverse(y0)?.0,
            None => y0.to_owned(),
        };
        let mut t = T0;
        let mut frames = Vec::with_capacity(times.len());
        for &target in times {
            if target > t {
                let seg = match solver.method {
                    SolverMethod::Rk4Fixed => {
                        // Keep the step length of a full-interval solve.
                        let frac = (target - t) / (self.t1() - T0);
                        let mut s = solver.clone();
                        s.fixed_steps = ((solver.fixed_steps as f64 * frac).round() as usize).max(1);
                        s
                    }
                    SolverMethod::Dopri5Adaptive => solver.clone(),
                };
                y = integrate_augmented(&self.dynamics, y.view(), t, target, z, &Probes::none(), &seg)?.state;
                t = target;
            }
            let frame = match &self.post_norm {
                Some(bn) => bn.inverse(y.view())?.0,
                None => y.clone(),
            };
            frames.push(frame);
        }
        Ok(frames)
    }

    /// Fold batch moments into the norms' running statistics.
    pub fn update_running_stats(&mut self, post: Option<&BatchMoments>, pre: Option<&BatchMoments>) {
        if let (Some(bn), Some(m)) = (self.post_norm.as_mut(), post) {
            if !bn.frozen {
                bn.update_running(m);
            }
        }
        if let (Some(bn), Some(m)) = (self.pre_norm.as_mut(), pre) {
            if !bn.frozen {
                bn.update_running(m);
            }
        }
    }
}

impl Parameterized for FlowTransform {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.dynamics.visit_params(&crate::flowcore::param_join(prefix, "dynamics"), f);
        if let Some(bn) = &self.pre_norm {
            bn.visit_params(&crate::flowcore::param_join(prefix, "pre_norm"), f);
        }
        if let Some(bn) = &self.post_norm {
            bn.visit_params(&crate::flowcore::param_join(prefix, "post_norm"), f);
        }
        f(&crate::flowcore::param_join(prefix, "t1"), &self.t1);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.dynamics.visit_params_mut(&crate::flowcore::param_join(prefix, "dynamics"), f);
        if let Some(bn) = &mut self.pre_norm {
            bn.visit_params_mut(&crate::flowcore::param_join(prefix, "pre_norm"), f);
        }
        if let Some(bn) = &mut self.post_norm {
            bn.visit_params_mut(&crate::flowcore::param_join(prefix, "post_norm"), f);
        }
        f(&crate::flowcore::param_join(prefix, "t1"), &mut self.t1);
    }
}
