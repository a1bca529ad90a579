//! Set distances and generative-model evaluation metrics.
//!
//! Stored values use the raw sum conventions; the display scale factors
//! (x10^3 for MMD-CD, x10^2 for MMD-EMD and JSD) are applied only by
//! [`MetricsReport::scaled`].

mod distance;
mod sets;

pub use crate::data::CloudSet;
pub use distance::{chamfer, emd_approx, emd_exact, hungarian};
pub use sets::{
    coverage, coverage_from_matrix, jsd, mmd, mmd_from_matrix, one_nna, one_nna_from_matrices, pairwise, Distance,
    EvalOptions, MetricsReport, ScaledReport,
};

/// Default voxel resolution per axis for [`jsd`].
pub const JSD_RESOLUTION: usize = 28;
