use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::param::{join, ParamTensor, Parameterized};
use crate::error::{Error, Result};

/// Smallest admissible `|gamma_i|`.
pub const GAMMA_FLOOR: f64 = 1e-6;
/// Smallest admissible running standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Moving batch normalization: `y = (x - mean) / std * gamma + beta` per
/// dimension, where `mean` and `std` are exponential running averages of
/// batch statistics. The transform itself always uses the running averages,
/// which makes it an invertible affine map with a data-independent
/// log-determinant `sum_i log|gamma_i| - log std_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingBatchNorm {
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
    pub running_mean: Vec<f64>,
    pub running_std: Vec<f64>,
    pub momentum: f64,
    pub frozen: bool,
}

/// Per-dimension mean and (unbiased) standard deviation of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
}

impl BatchMoments {
    pub fn of(batch: ArrayView2<f64>) -> Result<Self> {
        let n = batch.nrows();
        if n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "need at least 2 rows to estimate a standard deviation, got {n}"
            )));
        }
        let mean = batch.mean_axis(Axis(0)).expect("nonempty");
        let var = batch.var_axis(Axis(0), 1.0);
        Ok(BatchMoments {
            mean: mean.to_vec(),
            std: var.iter().map(|v| v.sqrt()).collect(),
            count: n,
        })
    }

    /// Moments of the union of two batches (pairwise update of Chan et al.).
    pub fn merge(&self, other: &BatchMoments) -> BatchMoments {
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut mean = Vec::with_capacity(self.mean.len());
        let mut std = Vec::with_capacity(self.mean.len());
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            let m2 = self.std[i].powi(2) * (na - 1.0) + other.std[i].powi(2) * (nb - 1.0) + delta * delta * na * nb / n;
            mean.push(self.mean[i] + delta * nb / n);
            std.push((m2 / (n - 1.0)).sqrt());
        }
        BatchMoments {
            mean,
            std,
            count: self.count + other.count,
        }
    }
}

impl MovingBatchNorm {
    pub fn new(dim: usize) -> Self {
        MovingBatchNorm {
            gamma: ParamTensor::filled(&[dim], 1.0),
            beta: ParamTensor::zeros(&[dim]),
            running_mean: vec![0.0; dim],
            running_std: vec![1.0; dim],
            momentum: 0.1,
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// `sum_i log|gamma_i| - log std_i`, the same for every row.
    pub fn logdet(&self) -> f64 {
        self.gamma
            .values()
            .iter()
            .zip(&self.running_std)
            .map(|(g, s)| g.abs().ln() - s.ln())
            .sum()
    }

    fn check(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.dim() {
            return Err(Error::contract(format!(
                "batch has width {}, normalization expects {}",
                batch.ncols(),
                self.dim()
            )));
        }
        if batch.nrows() == 0 {
            return Err(Error::contract("empty batch"));
        }
        Ok(())
    }

    /// Normalize with the running statistics; returns the output and the
    /// per-row log-determinant. In training mode (and not frozen) the
    /// running statistics are then updated from this batch.
    pub fn forward(&mut self, batch: ArrayView2<f64>, training: bool) -> Result<(Array2<f64>, f64)> {
        self.check(&batch)?;
        let moments = if training && !self.frozen {
            Some(BatchMoments::of(batch)?)
        } else {
            None
        };
        let out = self.forward_eval(batch)?;
        if let Some(m) = moments {
            self.update_running(&m);
        }
        Ok(out)
    }

    /// Normalize with the running statistics without touching them.
    pub fn forward_eval(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, f64)> {
        self.check(&batch)?;
        let (scale, offset) = self.affine_coeffs();
        let mut y = batch.to_owned();
        y.axis_iter_mut(Axis(0)).for_each(|mut row| {
            Zip::from(&mut row).and(&scale).and(&offset).for_each(|v, &a, &b| *v = *v * a + b);
        });
        Ok((y, self.logdet()))
    }

    /// `x = (y - beta) / gamma * std + mean`; log-determinant is the
    /// negation of the forward one.
    pub fn inverse(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, f64)> {
        self.check(&batch)?;
        for (index, g) in self.gamma.values().iter().enumerate() {
            if g.abs() < GAMMA_FLOOR {
                return Err(Error::SingularScale { index, value: *g });
            }
        }
        let g = self.gamma.values();
        let b = self.beta.values();
        let mut x = batch.to_owned();
        x.axis_iter_mut(Axis(0)).for_each(|mut row| {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - b[i]) / g[i] * self.running_std[i] + self.running_mean[i];
            }
        });
        Ok((x, -self.logdet()))
    }

    /// Reverse pass of [`forward_eval`](Self::forward_eval). `g_logdet` is
    /// the cotangent of the per-row log-determinant summed over rows.
    pub fn backward(
        &self,
        input: ArrayView2<f64>,
        g_out: ArrayView2<f64>,
        g_logdet: f64,
        grad: &mut MovingBatchNorm,
    ) -> Array2<f64> {
        let g = self.gamma.values();
        let d = self.dim();
        let mut g_gamma = vec![0.0; d];
        let mut g_beta = vec![0.0; d];
        for (row, grow) in input.rows().into_iter().zip(g_out.rows()) {
            for i in 0..d {
                let xhat = (row[i] - self.running_mean[i]) / self.running_std[i];
                g_gamma[i] += grow[i] * xhat;
                g_beta[i] += grow[i];
            }
        }
        for i in 0..d {
            grad.gamma.values_mut()[i] += g_gamma[i] + g_logdet / g[i];
            grad.beta.values_mut()[i] += g_beta[i];
        }
        let scale: Array1<f64> = (0..d).map(|i| g[i] / self.running_std[i]).collect();
        let mut g_in = g_out.to_owned();
        g_in *= &scale;
        g_in
    }

    /// Fold a batch's moments into the running averages.
    pub fn update_running(&mut self, m: &BatchMoments) {
        let mom = self.momentum;
        for i in 0..self.dim() {
            self.running_mean[i] = (1.0 - mom) * self.running_mean[i] + mom * m.mean[i];
            let s = (1.0 - mom) * self.running_std[i] + mom * m.std[i];
            self.running_std[i] = s.max(STD_FLOOR);
        }
    }

    /// Push `|gamma_i|` back above [`GAMMA_FLOOR`], keeping its sign.
    pub fn project(&mut self) {
        for g in self.gamma.values_mut() {
            if g.abs() < GAMMA_FLOOR {
                *g = if *g < 0.0 { -GAMMA_FLOOR } else { GAMMA_FLOOR };
            }
        }
    }

    fn affine_coeffs(&self) -> (Array1<f64>, Array1<f64>) {
        let g = self.gamma.values();
        let b = self.beta.values();
        let scale: Array1<f64> = (0..self.dim()).map(|i| g[i] / self.running_std[i]).collect();
        let offset: Array1<f64> = (0..self.dim())
            .map(|i| b[i] - self.running_mean[i] * scale[i])
            .collect();
        (scale, offset)
    }
}

impl Parameterized for MovingBatchNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng as _;

    fn random_bn(dim: usize, rng: &mut crate::rng::Rng) -> MovingBatchNorm {
        let mut bn = MovingBatchNorm::new(dim);
        for i in 0..dim {
            bn.gamma.values_mut()[i] = rng.random_range(0.3..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            bn.beta.values_mut()[i] = rng.random_range(-1.0..1.0);
            bn.running_mean[i] = rng.random_range(-2.0..2.0);
            bn.running_std[i] = rng.random_range(0.2..3.0);
        }
        bn
    }

    #[test]
    fn merged_moments_equal_moments_of_union() {
        let mut rng = crate::rng::seeded(4);
        let a = Array2::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
        let b = Array2::from_shape_fn((9, 3), |_| rng.random_range(0.0..4.0));
        let joint = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
        let m = BatchMoments::of(a.view()).unwrap().merge(&BatchMoments::of(b.view()).unwrap());
        let want = BatchMoments::of(joint.view()).unwrap();
        assert_eq!(m.count, 14);
        for i in 0..3 {
            assert!((m.mean[i] - want.mean[i]).abs() < 1e-12);
            assert!((m.std[i] - want.std[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn default_is_identity() {
        let mut bn = MovingBatchNorm::new(3);
        let x = array![[1.0, -2.0, 0.5], [0.0, 3.0, 4.0]];
        let (y, ld) = bn.forward(x.view(), false).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
        let (xi, ldi) = bn.inverse(x.view()).unwrap();
        assert_eq!(xi, x);
        assert_eq!(ldi, 0.0);
    }

    #[test]
    fn logdet_of_doubling_gamma() {
        let mut bn = MovingBatchNorm::new(3);
        bn.gamma = ParamTensor::filled(&[3], 2.0);
        let (_, ld) = bn.forward_eval(array![[0.0, 0.0, 0.0]].view()).unwrap();
        assert!((ld - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn round_trip_and_logdet_cancel() {
        let mut rng = crate::rng::seeded(17);
        for _ in 0..20 {
            let bn = random_bn(4, &mut rng);
            let x = Array2::from_shape_fn((9, 4), |_| rng.random_range(-5.0..5.0));
            let (y, ld_f) = bn.forward_eval(x.view()).unwrap();
            let (back, ld_i) = bn.inverse(y.view()).unwrap();
            assert_eq!(ld_f + ld_i, 0.0);
            let err = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-12, "round trip error {err}");
        }
    }

    #[test]
    fn training_needs_two_rows_unless_frozen() {
        let mut bn = MovingBatchNorm::new(2);
        let one = array![[1.0, 2.0]];
        assert!(matches!(bn.forward(one.view(), true), Err(Error::DegenerateBatch(_))));
        assert!(bn.forward(one.view(), false).is_ok());
        bn.frozen = true;
        assert!(bn.forward(one.view(), true).is_ok());
    }

    #[test]
    fn eval_mode_leaves_statistics_untouched() {
        let mut bn = MovingBatchNorm::new(2);
        let before = bn.clone();
        bn.forward(array![[1.0, 2.0], [3.0, 5.0]].view(), false).unwrap();
        assert_eq!(bn, before);
    }

    #[test]
    fn running_statistics_converge_to_repeated_batch() {
        let mut rng = crate::rng::seeded(4);
        let batch = Array2::from_shape_fn((32, 3), |(_, j)| rng.random_range(-1.0..1.0) * (j + 1) as f64 + j as f64);
        let target = BatchMoments::of(batch.view()).unwrap();
        let mut bn = MovingBatchNorm::new(3);
        for _ in 0..400 {
            bn.forward(batch.view(), true).unwrap();
        }
        for i in 0..3 {
            assert!((bn.running_mean[i] - target.mean[i]).abs() < 1e-12);
            assert!((bn.running_std[i] - target.std[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_gamma_is_singular() {
        let mut bn = MovingBatchNorm::new(2);
        bn.gamma.values_mut()[1] = 1e-9;
        assert!(matches!(bn.inverse(array![[0.0, 0.0]].view()), Err(Error::SingularScale { index: 1, .. })));
        bn.project();
        assert!(bn.inverse(array![[0.0, 0.0]].view()).is_ok());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = crate::rng::seeded(23);
        let bn = random_bn(3, &mut rng);
        let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
        let w = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let c = 0.7;
        let loss = |bn: &MovingBatchNorm, x: &Array2<f64>| {
            let (y, ld) = bn.forward_eval(x.view()).unwrap();
            (&y * &w).sum() + c * ld * x.nrows() as f64
        };
        let mut grad = bn.zeros_like();
        let gx = bn.backward(x.view(), w.view(), c * x.nrows() as f64, &mut grad);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = bn.clone();
            let mut m = bn.clone();
            p.gamma.values_mut()[i] += h;
            m.gamma.values_mut()[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grad.gamma.values()[i]).abs() < 1e-6);
            let mut p = bn.clone();
            let mut m = bn.clone();
            p.beta.values_mut()[i] += h;
            m.beta.values_mut()[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grad.beta.values()[i]).abs() < 1e-6);
        }
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[[2, 1]] += h;
        xm[[2, 1]] -= h;
        let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h);
        assert!((fd - gx[[2, 1]]).abs() < 1e-6);
    }
}
