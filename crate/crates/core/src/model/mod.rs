//! The generative model: set encoder, latent prior flow, conditional point
//! decoder flow, the ELBO and its gradient, sampling and interpolation.

mod encoder;
mod gradient;
mod interpolate;
mod pointflow;

pub use encoder::{Dense, Encoder, EncoderCache, EncoderConfig, PosteriorGaussian, LOG_SIGMA_MAX, LOG_SIGMA_MIN};
pub use gradient::{BatchGradient, BatchNoise, NormMoments, Objective, ShapeNoise};
pub use interpolate::{slerp, Interpolation};
pub use pointflow::{
    posterior_entropy, reparam_sample, reparameterize, standard_normal_vec, ElboBreakdown, ModelConfig, PointFlowModel, PriorMode,
    SolverSettings, TraceSettings,
};
