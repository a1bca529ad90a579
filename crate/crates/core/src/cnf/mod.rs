//! Continuous normalizing flows: ODE solvers, trace estimation and the
//! flow transform that ties dynamics and normalization together.

mod flow;
mod solver;
mod trace;

pub use flow::{standard_normal_log_prob, FlowResult, FlowTransform, LogProbGrad, MIN_INTEGRATION_TIME, T0};
pub use solver::{integrate, integrate_augmented, AugmentedSolution, SolverConfig, SolverMethod};
pub use trace::{trace_exact, trace_hutchinson, TraceConfig, TraceMode, TraceNoise, EXACT_TRACE_MAX_DIM};
