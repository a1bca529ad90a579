use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::pointflow::{PointFlowModel, PriorMode};
use crate::error::{Error, Result};

/// Angles within this of pi are treated as antiparallel.
const ANTIPARALLEL_TOL: f64 = 1e-6;

/// Frames decoded along a path between two shapes.
#[derive(Debug, Clone)]
pub struct Interpolation {
    pub frames: Vec<Array2<f64>>,
    /// Base-space codes of the frames.
    pub codes: Vec<Array1<f64>>,
    /// Set when the endpoints were antiparallel and linear interpolation
    /// was used instead of slerp.
    pub linear_fallback: bool,
}

/// Spherical linear interpolation. Returns `None` when the vectors are
/// antiparallel (the great circle is not unique). Parallel or zero vectors
/// fall back to linear interpolation, which is then exact.
pub fn slerp(a: ArrayView1<f64>, b: ArrayView1<f64>, alpha: f64) -> Option<Array1<f64>> {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    let lerp = || &a * (1.0 - alpha) + &b * alpha;
    if na == 0.0 || nb == 0.0 {
        return Some(lerp());
    }
    let cos = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if std::f64::consts::PI - omega < ANTIPARALLEL_TOL {
        return None;
    }
    let s = omega.sin();
    if s < 1e-12 {
        return Some(lerp());
    }
    Some(&a * (((1.0 - alpha) * omega).sin() / s) + &b * ((alpha * omega).sin() / s))
}

impl PointFlowModel {
    /// Decode `steps` shapes along the slerp path between the base-space
    /// codes of `x1` and `x2` (posterior means pulled back through the prior
    /// flow). Every frame is decoded from the same base points, drawn from
    /// `seed`.
    pub fn interpolate(
        &self,
        x1: ArrayView2<f64>,
        x2: ArrayView2<f64>,
        steps: usize,
        m: usize,
        seed: u64,
    ) -> Result<Interpolation> {
        if steps < 2 {
            return Err(Error::contract("interpolation needs at least 2 steps"));
        }
        if self.config.prior_mode != PriorMode::Cnf {
            return Err(Error::contract("interpolation is defined through the prior flow"));
        }
        let w1 = self.base_from_code(self.encode(x1)?.mu.view())?;
        let w2 = self.base_from_code(self.encode(x2)?.mu.view())?;
        let mut linear_fallback = false;
        let mut frames = Vec::with_capacity(steps);
        let mut codes = Vec::with_capacity(steps);
        for k in 0..steps {
            let alpha = k as f64 / (steps - 1) as f64;
            let w = slerp(w1.view(), w2.view(), alpha).unwrap_or_else(|| {
                linear_fallback = true;
                &w1 * (1.0 - alpha) + &w2 * alpha
            });
            let z = self.code_from_base(w.view())?;
            let mut rng = crate::rng::seeded(seed);
            frames.push(self.sample_points(z.view(), m, &mut rng)?);
            codes.push(w);
        }
        if linear_fallback {
            log::warn!("interpolation endpoints are antiparallel; used linear interpolation");
        }
        Ok(Interpolation {
            frames,
            codes,
            linear_fallback,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn slerp_endpoints_and_norms() {
        let a = array![3.0, 0.0];
        let b = array![0.0, 1.0];
        assert!((slerp(a.view(), b.view(), 0.0).unwrap() - &a).iter().all(|v| v.abs() < 1e-15));
        assert!((slerp(a.view(), b.view(), 1.0).unwrap() - &b).iter().all(|v| v.abs() < 1e-15));
        // Orthogonal vectors: omega = pi/2, so the midpoint is (a + b) / sqrt 2.
        let mid = slerp(a.view(), b.view(), 0.5).unwrap();
        let want = (&a + &b) / 2f64.sqrt();
        assert!((mid - want).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn slerp_antiparallel_and_equal() {
        let a = array![1.0, 2.0];
        assert!(slerp(a.view(), (-&a).view(), 0.3).is_none());
        let same = slerp(a.view(), a.view(), 0.7).unwrap();
        assert!((same - &a).iter().all(|v| v.abs() < 1e-15));
    }
}
