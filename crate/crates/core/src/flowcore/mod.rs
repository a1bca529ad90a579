//! Differentiable building blocks for flow dynamics and normalization.
//!
//! Every layer here has a hand-written reverse pass. Gradients are
//! accumulated into a value of the same type as the layer (see
//! [`Parameterized::zeros_like`]), so a gradient can be flattened, clipped
//! and applied with the same machinery used for the parameters themselves.

mod dynamics;
mod layers;
mod mbn;
mod param;

pub use dynamics::{DynamicsNet, DynamicsVjp, Probes};
pub(crate) use param::join as param_join;
pub use layers::{ConcatSquashLayer, ConditionalConcatSquashLayer, SquashLayer};
pub use mbn::{MovingBatchNorm, BatchMoments, GAMMA_FLOOR, STD_FLOOR};
pub use param::{ParamEntry, ParamTensor, Parameterized};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
