use ndarray::{Array1, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowcore::{DynamicsNet, Probes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Rk4Fixed,
    Dopri5Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    #[serde(default = "default_steps")]
    pub fixed_steps: usize,
    #[serde(default = "default_tol")]
    pub rtol: f64,
    #[serde(default = "default_tol")]
    pub atol: f64,
    #[serde(default = "default_max_evals")]
    pub max_evals: usize,
}

fn default_steps() -> usize {
    20
}
fn default_tol() -> f64 {
    1e-5
}
fn default_max_evals() -> usize {
    10_000
}

impl SolverConfig {
    pub fn rk4(steps: usize) -> Self {
        SolverConfig {
            method: SolverMethod::Rk4Fixed,
            fixed_steps: steps,
            rtol: default_tol(),
            atol: default_tol(),
            max_evals: default_max_evals(),
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            method: SolverMethod::Dopri5Adaptive,
            fixed_steps: default_steps(),
            rtol,
            atol,
            max_evals: default_max_evals(),
        }
    }

    /// Default for training: fixed-step RK4 with 20 steps.
    pub fn training_default() -> Self {
        Self::rk4(20)
    }

    /// Default for evaluation: Dormand-Prince with rtol = atol = 1e-5.
    pub fn eval_default() -> Self {
        Self::dopri5(1e-5, 1e-5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fixed_steps < 1 {
            return Err(Error::Config("fixed_steps must be at least 1".into()));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("rtol and atol must be positive".into()));
        }
        if self.max_evals < 100 {
            return Err(Error::Config("max_evals must be at least 100".into()));
        }
        Ok(())
    }
}

/// Solution of the state-plus-log-density system.
#[derive(Debug, Clone)]
pub struct AugmentedSolution {
    pub state: Array2<f64>,
    /// `integral of -Tr(df/dy) dt` from `t_start` to `t_end`, per row.
    pub log_density_change: Array1<f64>,
    pub evals: usize,
}

/// Right-hand side of the augmented system at one time.
pub(crate) struct Rhs<'a> {
    pub dynamics: &'a DynamicsNet,
    pub z: Option<&'a [f64]>,
    pub probes: &'a Probes,
}

impl Rhs<'_> {
    pub fn eval(&self, y: ArrayView2<f64>, t: f64) -> Result<(Array2<f64>, Array1<f64>)> {
        let (f, tr) = self.dynamics.eval_with_trace(y, t, self.z, self.probes)?;
        Ok((f, -tr))
    }
}

/// Integrate `dy/dt = dynamics(y, t, z)` from `t_start` to `t_end`
/// (either order). Returns the final state and the number of dynamics
/// evaluations.
pub fn integrate(
    dynamics: &DynamicsNet,
    y0: ArrayView2<f64>,
    t_start: f64,
    t_end: f64,
    z: Option<&[f64]>,
    cfg: &SolverConfig,
) -> Result<(Array2<f64>, usize)> {
    let sol = integrate_augmented(dynamics, y0, t_start, t_end, z, &Probes::none(), cfg)?;
    Ok((sol.state, sol.evals))
}

/// Integrate the state jointly with `-Tr(df/dy)` estimated along `probes`.
pub fn integrate_augmented(
    dynamics: &DynamicsNet,
    y0: ArrayView2<f64>,
    t_start: f64,
    t_end: f64,
    z: Option<&[f64]>,
    probes: &Probes,
    cfg: &SolverConfig,
) -> Result<AugmentedSolution> {
    cfg.validate().map_err(|e| Error::contract(e.to_string()))?;
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    let rhs = Rhs { dynamics, z, probes };
    match cfg.method {
        SolverMethod::Rk4Fixed => rk4(&rhs, y0, t_start, t_end, cfg.fixed_steps, None),
        SolverMethod::Dopri5Adaptive => dopri5(&rhs, y0, t_start, t_end, cfg),
    }
}

/// Stage values of one RK4 step, kept for the reverse pass.
#[derive(Debug, Clone)]
pub(crate) struct Rk4Step {
    pub y: Array2<f64>,
    pub k: [Array2<f64>; 4],
    pub a: [Array1<f64>; 4],
}

fn axpy(y: &Array2<f64>, h: f64, k: &Array2<f64>) -> Array2<f64> {
    let mut out = y.clone();
    out.scaled_add(h, k);
    out
}

pub(crate) fn rk4(
    rhs: &Rhs<'_>,
    y0: ArrayView2<f64>,
    t_start: f64,
    t_end: f64,
    steps: usize,
    mut record: Option<&mut Vec<Rk4Step>>,
) -> Result<AugmentedSolution> {
    let h = (t_end - t_start) / steps as f64;
    let mut y = y0.to_owned();
    let mut acc = Array1::zeros(y.nrows());
    for i in 0..steps {
        let t = t_start + i as f64 * h;
        let (k1, a1) = rhs.eval(y.view(), t)?;
        let (k2, a2) = rhs.eval(axpy(&y, 0.5 * h, &k1).view(), t + 0.5 * h)?;
        let (k3, a3) = rhs.eval(axpy(&y, 0.5 * h, &k2).view(), t + 0.5 * h)?;
        let (k4, a4) = rhs.eval(axpy(&y, h, &k3).view(), t + h)?;
        let mut next = y.clone();
        Zip::from(&mut next)
            .and(&k1)
            .and(&k2)
            .and(&k3)
            .and(&k4)
            .for_each(|v, &a, &b, &c, &d| *v += h / 6.0 * (a + 2.0 * b + 2.0 * c + d));
        Zip::from(&mut acc)
            .and(&a1)
            .and(&a2)
            .and(&a3)
            .and(&a4)
            .for_each(|v, &a, &b, &c, &d| *v += h / 6.0 * (a + 2.0 * b + 2.0 * c + d));
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Rk4Step {
                y: std::mem::replace(&mut y, next),
                k: [k1, k2, k3, k4],
                a: [a1, a2, a3, a4],
            });
        } else {
            y = next;
        }
    }
    Ok(AugmentedSolution {
        state: y,
        log_density_change: acc,
        evals: 4 * steps,
    })
}

/// Reverse pass through an RK4 solve recorded by [`rk4`].
///
/// `g_state` and `g_acc` are cotangents of the final state and of the
/// accumulated log-density change. Parameter gradients go into `grad`;
/// returns `(d/dy0, d/dt_start, d/dt_end)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rk4_backward(
    rhs: &Rhs<'_>,
    record: &[Rk4Step],
    t_start: f64,
    t_end: f64,
    g_state: Array2<f64>,
    g_acc: &Array1<f64>,
    grad: &mut DynamicsNet,
    mut g_z: Option<&mut [f64]>,
) -> Result<(Array2<f64>, f64, f64)> {
    let steps = record.len();
    let h = (t_end - t_start) / steps as f64;
    let mut g_y = g_state;
    let mut g_h = 0.0;
    let mut g_t_start = 0.0;
    let dot = |a: &Array2<f64>, b: &Array2<f64>| -> f64 { Zip::from(a).and(b).fold(0.0, |s, &x, &y| s + x * y) };
    for (i, step) in record.iter().enumerate().rev() {
        let t = t_start + i as f64 * h;
        let [k1, k2, k3, k4] = &step.k;
        let [a1, a2, a3, a4] = &step.a;
        let y2 = axpy(&step.y, 0.5 * h, k1);
        let y3 = axpy(&step.y, 0.5 * h, k2);
        let y4 = axpy(&step.y, h, k3);

        let mut stage = |y: &Array2<f64>, ts: f64, g_f: Array2<f64>, coef: f64| -> Result<crate::flowcore::DynamicsVjp> {
            let g_tr = g_acc.mapv(|g| -coef * h * g);
            let v = rhs
                .dynamics
                .vjp(y.view(), ts, rhs.z, rhs.probes, g_f.view(), g_tr.view(), grad)?;
            if let (Some(acc), Some(gz)) = (g_z.as_deref_mut(), v.g_z.as_ref()) {
                acc.iter_mut().zip(gz).for_each(|(a, b)| *a += b);
            }
            Ok(v)
        };

        let v4 = stage(&y4, t + h, &g_y * (h / 6.0), 1.0 / 6.0)?;
        let mut g3 = &g_y * (h / 3.0);
        g3.scaled_add(h, &v4.g_y);
        let v3 = stage(&y3, t + 0.5 * h, g3, 1.0 / 3.0)?;
        let mut g2 = &g_y * (h / 3.0);
        g2.scaled_add(0.5 * h, &v3.g_y);
        let v2 = stage(&y2, t + 0.5 * h, g2, 1.0 / 3.0)?;
        let mut g1 = &g_y * (h / 6.0);
        g1.scaled_add(0.5 * h, &v2.g_y);
        let v1 = stage(&step.y, t, g1, 1.0 / 6.0)?;

        let incr_y = (dot(&g_y, k1) + 2.0 * dot(&g_y, k2) + 2.0 * dot(&g_y, k3) + dot(&g_y, k4)) / 6.0;
        let incr_a: f64 = Zip::from(g_acc)
            .and(a1)
            .and(a2)
            .and(a3)
            .and(a4)
            .fold(0.0, |s, &g, &p, &q, &r, &u| s + g * (p + 2.0 * q + 2.0 * r + u) / 6.0);
        g_h += incr_y + incr_a + 0.5 * dot(&v2.g_y, k1) + 0.5 * dot(&v3.g_y, k2) + dot(&v4.g_y, k3);

        let fi = i as f64;
        g_t_start += v1.g_t + v2.g_t + v3.g_t + v4.g_t;
        g_h += fi * v1.g_t + (fi + 0.5) * (v2.g_t + v3.g_t) + (fi + 1.0) * v4.g_t;

        g_y += &v1.g_y;
        g_y += &v2.g_y;
        g_y += &v3.g_y;
        g_y += &v4.g_y;
    }
    let n = steps as f64;
    Ok((g_y, g_t_start - g_h / n, g_h / n))
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights equal the last row of A; these are fifth minus fourth.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Joint state for the adaptive solver: points plus log-density column.
#[derive(Clone)]
struct Aug {
    y: Array2<f64>,
    a: Array1<f64>,
}

impl Aug {
    fn combine(&self, h: f64, ks: &[Aug], coeffs: &[f64]) -> Aug {
        let mut out = self.clone();
        for (k, &c) in ks.iter().zip(coeffs) {
            if c != 0.0 {
                out.y.scaled_add(h * c, &k.y);
                out.a.scaled_add(h * c, &k.a);
            }
        }
        out
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.y.iter().chain(self.a.iter()).copied()
    }
}

fn rms_norm(err: &Aug, old: &Aug, new: &Aug, cfg: &SolverConfig) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((e, o), n) in err.values().zip(old.values()).zip(new.values()) {
        let sc = cfg.atol + cfg.rtol * o.abs().max(n.abs());
        sum += (e / sc).powi(2);
        count += 1;
    }
    (sum / count.max(1) as f64).sqrt()
}

fn dopri5(
    rhs: &Rhs<'_>,
    y0: ArrayView2<f64>,
    t_start: f64,
    t_end: f64,
    cfg: &SolverConfig,
) -> Result<AugmentedSolution> {
    let n = y0.nrows();
    let span = t_end - t_start;
    let mut state = Aug {
        y: y0.to_owned(),
        a: Array1::zeros(n),
    };
    if span == 0.0 || n == 0 {
        return Ok(AugmentedSolution {
            state: state.y,
            log_density_change: state.a,
            evals: 0,
        });
    }
    let dir = span.signum();
    let eval = |s: &Aug, t: f64| -> Result<Aug> {
        let (y, a) = rhs.eval(s.y.view(), t)?;
        Ok(Aug { y, a })
    };

    let mut evals = 0usize;
    let mut t = t_start;
    let mut k0 = eval(&state, t)?;
    evals += 1;

    // Starting step (Hairer, Norsett & Wanner, II.4).
    let scale_norm = |v: &Aug, s: &Aug| {
        let mut sum = 0.0;
        let mut c = 0usize;
        for (x, y) in v.values().zip(s.values()) {
            sum += (x / (cfg.atol + cfg.rtol * y.abs())).powi(2);
            c += 1;
        }
        (sum / c.max(1) as f64).sqrt()
    };
    let d0 = scale_norm(&state, &state);
    let d1 = scale_norm(&k0, &state);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let probe = state.combine(dir * h0, std::slice::from_ref(&k0), &[1.0]);
    let k_probe = eval(&probe, t + dir * h0)?;
    evals += 1;
    let diff = Aug {
        y: &k_probe.y - &k0.y,
        a: &k_probe.a - &k0.a,
    };
    let d2 = scale_norm(&diff, &state) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    let mut h = (100.0 * h0).min(h1).min(span.abs());

    while (t_end - t) * dir > 0.0 {
        if evals + 6 > cfg.max_evals {
            return Err(Error::NonConvergence {
                evals,
                t_reached: t,
                state: Box::new(state.y),
            });
        }
        let remaining = (t_end - t).abs();
        let last = h >= remaining;
        let step = if last { remaining } else { h };
        let hs = dir * step;

        let mut ks: Vec<Aug> = Vec::with_capacity(7);
        ks.push(k0.clone());
        for s in 1..7 {
            let stage = state.combine(hs, &ks, &A[s][..s]);
            ks.push(eval(&stage, t + C[s] * hs)?);
        }
        evals += 6;
        let new = state.combine(hs, &ks[..6], &A[6][..6]);
        let err = Aug {
            y: Array2::zeros(state.y.raw_dim()),
            a: Array1::zeros(n),
        }
        .combine(hs, &ks, &E);
        let err_norm = rms_norm(&err, &state, &new, cfg);
        if !err_norm.is_finite() {
            return Err(Error::NonFinite(format!("adaptive step error at t = {t}")));
        }
        if err_norm <= 1.0 {
            t = if last { t_end } else { t + hs };
            state = new;
            k0 = ks.pop().expect("seven stages");
        }
        let factor = if err_norm == 0.0 {
            10.0
        } else {
            (0.9 * err_norm.powf(-0.2)).clamp(0.2, 10.0)
        };
        h = step * factor;
        if h < 1e-12 * span.abs() {
            return Err(Error::NonConvergence {
                evals,
                t_reached: t,
                state: Box::new(state.y),
            });
        }
    }
    Ok(AugmentedSolution {
        state: state.y,
        log_density_change: state.a,
        evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcore::{ConcatSquashLayer, ParamTensor, SquashLayer};
    use ndarray::array;

    /// One concatsquash layer with zero gate logits and `W_x = 2a I`, so `f(y) = a y`.
    pub(crate) fn linear_dynamics(dim: usize, a: f64) -> DynamicsNet {
        let mut l = ConcatSquashLayer::zeros(dim, dim);
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 2.0 * a;
        }
        l.w_x = ParamTensor::from_vec(&[dim, dim], w).unwrap();
        DynamicsNet::from_layers(vec![SquashLayer::Plain(l)]).unwrap()
    }

    #[test]
    fn zero_dynamics_is_exact_identity() {
        let net = DynamicsNet::zeros(2, &[4], None);
        let y0 = array![[0.3, -1.0], [2.0, 5.0]];
        for cfg in [SolverConfig::rk4(7), SolverConfig::dopri5(1e-7, 1e-7)] {
            let (y, _) = integrate(&net, y0.view(), 0.0, 1.3, None, &cfg).unwrap();
            assert_eq!(y, y0);
            let (y, _) = integrate(&net, y0.view(), 1.3, -0.2, None, &cfg).unwrap();
            assert_eq!(y, y0);
        }
    }

    #[test]
    fn dopri5_solves_exponential() {
        let net = linear_dynamics(2, 1.0);
        let (y, evals) = integrate(&net, array![[1.0, 1.0]].view(), 0.0, 1.0, None, &SolverConfig::dopri5(1e-7, 1e-7)).unwrap();
        let e = std::f64::consts::E;
        for v in y.iter() {
            assert!(((v - e) / e).abs() < 1e-6);
        }
        assert!(evals > 0);
    }

    #[test]
    fn dopri5_reverse_time() {
        let net = linear_dynamics(1, 1.0);
        let (y, _) = integrate(&net, array![[1.0]].view(), 1.0, 0.0, None, &SolverConfig::dopri5(1e-8, 1e-8)).unwrap();
        assert!((y[[0, 0]] - (-1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let net = linear_dynamics(2, 1.0);
        let e = std::f64::consts::E;
        let err = |steps| {
            let (y, _) = integrate(&net, array![[1.0, 1.0]].view(), 0.0, 1.0, None, &SolverConfig::rk4(steps)).unwrap();
            (y[[0, 0]] - e).abs()
        };
        let e20 = err(20);
        let e40 = err(40);
        // Leading error term is e h^4 / 120 ~ 1.4e-7.
        assert!(e20 < 2e-7, "{e20}");
        let ratio = e20 / e40;
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn adaptive_budget_exhaustion_reports_state() {
        let net = linear_dynamics(1, 30.0);
        let mut cfg = SolverConfig::dopri5(1e-12, 1e-12);
        cfg.max_evals = 100;
        match integrate(&net, array![[1.0]].view(), 0.0, 3.0, None, &cfg) {
            Err(Error::NonConvergence { evals, t_reached, state }) => {
                assert!(evals <= 100);
                assert!(t_reached > 0.0 && t_reached < 3.0);
                assert!(state[[0, 0]] > 1.0);
            }
            other => panic!("expected nonconvergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = SolverConfig::rk4(0);
        assert!(c.validate().is_err());
        c = SolverConfig::dopri5(0.0, 1e-5);
        assert!(c.validate().is_err());
        c = SolverConfig::eval_default();
        c.max_evals = 10;
        assert!(c.validate().is_err());
        assert!(SolverConfig::training_default().validate().is_ok());
    }
}
