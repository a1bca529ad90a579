//! Point-set generative modelling with a two-level hierarchy of continuous
//! normalizing flows, trained by maximizing an evidence lower bound, and the
//! standard evaluation suite for point-cloud generative models.
//!
//! Module map:
//!
//! * [`flowcore`]: parameter tensors, concatsquash layers, dynamics networks,
//!   moving batch normalization, all with exact hand-written gradients.
//! * [`cnf`]: ODE integration of state and log-density, trace estimators,
//!   forward/inverse flows and gradients through the fixed-step solver.
//! * [`model`]: encoder, CNF prior, conditional CNF decoder, ELBO, sampling.
//! * [`metrics`]: Chamfer, EMD (Hungarian and auction), JSD, COV, MMD, 1-NNA.
//! * [`data`]: synthetic shape families, normalization, XYZ/PLY I/O.
//! * [`train`]: Adam, learning-rate schedule, trainer loop, checkpoints.
//! * [`cli`]: run configuration and the command implementations behind the
//!   `pointflow` binary.

pub mod cli;
pub mod cnf;
pub mod data;
pub mod error;
pub mod flowcore;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
