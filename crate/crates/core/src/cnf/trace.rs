use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowcore::{DynamicsNet, Probes};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    Exact,
    Hutchinson,
}

/// Probe distribution for the stochastic estimator. Only Rademacher is offered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceNoise {
    #[default]
    Rademacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub mode: TraceMode,
    #[serde(default = "one")]
    pub hutchinson_samples: usize,
    #[serde(default)]
    pub noise: TraceNoise,
}

fn one() -> usize {
    1
}

/// Dimensions up to this use the exact trace under [`TraceConfig::auto`].
pub const EXACT_TRACE_MAX_DIM: usize = 8;

impl TraceConfig {
    pub fn exact() -> Self {
        TraceConfig {
            mode: TraceMode::Exact,
            hutchinson_samples: 1,
            noise: TraceNoise::Rademacher,
        }
    }

    pub fn hutchinson(samples: usize) -> Self {
        TraceConfig {
            mode: TraceMode::Hutchinson,
            hutchinson_samples: samples,
            noise: TraceNoise::Rademacher,
        }
    }

    /// Exact trace for small dimensions, otherwise Hutchinson with `samples`.
    pub fn auto(dim: usize, samples: usize) -> Self {
        if dim <= EXACT_TRACE_MAX_DIM {
            Self::exact()
        } else {
            Self::hutchinson(samples)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hutchinson_samples < 1 {
            return Err(Error::Config("hutchinson_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// Probe directions for a batch of `rows` states of width `dim`. Random
    /// probes are drawn once per solve and held fixed along the trajectory.
    pub fn probes(&self, rows: usize, dim: usize, rng: &mut Rng) -> Probes {
        match self.mode {
            TraceMode::Exact => Probes::exact(rows, dim),
            TraceMode::Hutchinson => Probes::rademacher(rows, dim, self.hutchinson_samples, rng),
        }
    }
}

/// Exact `Tr(df/dy)` at a single state via one directional derivative per
/// coordinate.
pub fn trace_exact(dynamics: &DynamicsNet, y: &[f64], t: f64, z: Option<&[f64]>) -> Result<f64> {
    let d = y.len();
    let view = ArrayView2::from_shape((1, d), y).map_err(|e| Error::contract(e.to_string()))?;
    let (_, tr) = dynamics.eval_with_trace(view, t, z, &Probes::exact(1, d))?;
    Ok(tr[0])
}

/// Hutchinson estimate `(1/S) sum_s e_s^T (df/dy) e_s` with Rademacher `e_s`.
pub fn trace_hutchinson(
    dynamics: &DynamicsNet,
    y: &[f64],
    t: f64,
    z: Option<&[f64]>,
    cfg: &TraceConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if cfg.mode != TraceMode::Hutchinson {
        return Err(Error::contract("trace_hutchinson needs a hutchinson trace config"));
    }
    cfg.validate().map_err(|e| Error::contract(e.to_string()))?;
    let d = y.len();
    let view = ArrayView2::from_shape((1, d), y).map_err(|e| Error::contract(e.to_string()))?;
    let probes = Probes::rademacher(1, d, cfg.hutchinson_samples, rng);
    let (_, tr) = dynamics.eval_with_trace(view, t, z, &probes)?;
    Ok(tr[0])
}
