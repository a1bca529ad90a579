use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowcore::{param_join, ParamTensor, Parameterized};
use crate::rng::Rng;

/// `log sigma` is clamped to this range before exponentiation.
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

/// Fully connected affine map `y = W x + b`, `W` stored as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: ParamTensor,
    pub b: ParamTensor,
}

impl Dense {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Dense {
            w: ParamTensor::uniform_fan_in(&[output, input], input, rng),
            b: ParamTensor::uniform_fan_in(&[output], input, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    /// Rowwise `x W^T + b`.
    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.view2().t());
        y += &self.b.view1();
        y
    }

    /// Accumulate parameter gradients for cotangent `g` of the output of
    /// `forward(x)`; returns the input cotangent.
    fn backward(&self, x: ArrayView2<f64>, g: ArrayView2<f64>, grad: &mut Dense) -> Array2<f64> {
        let mut gw = grad.w.view2_mut();
        ndarray::linalg::general_mat_mul(1.0, &g.t(), &x, 1.0, &mut gw);
        let gb = g.sum_axis(Axis(0));
        grad.b.values_mut().iter_mut().zip(gb.iter()).for_each(|(a, b)| *a += b);
        g.dot(&self.w.view2())
    }
}

impl Parameterized for Dense {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&param_join(prefix, "w"), &self.w);
        f(&param_join(prefix, "b"), &self.b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&param_join(prefix, "w"), &mut self.w);
        f(&param_join(prefix, "b"), &mut self.b);
    }
}

/// Widths of the set encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output widths of the shared per-point stages.
    #[serde(default = "default_pointwise")]
    pub pointwise: Vec<usize>,
    /// Hidden widths of the head after pooling; the head ends at `2 * dz`.
    #[serde(default = "default_head")]
    pub head: Vec<usize>,
}

fn default_pointwise() -> Vec<usize> {
    vec![128, 128, 256, 512]
}

fn default_head() -> Vec<usize> {
    vec![256, 128]
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            pointwise: default_pointwise(),
            head: default_head(),
        }
    }
}

/// Diagonal Gaussian `q(z | X) = N(mu, diag(sigma^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGaussian {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

impl PosteriorGaussian {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Permutation-invariant set encoder: a shared per-point ReLU MLP, an
/// elementwise max over points, then a ReLU MLP head producing
/// `(mu, log sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub pointwise: Vec<Dense>,
    pub head: Vec<Dense>,
}

/// Activations kept from a forward pass for [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Input to every pointwise stage, followed by the last stage's output.
    point_acts: Vec<Array2<f64>>,
    /// Row that attains the max in each pooled column.
    argmax: Vec<usize>,
    /// Input to every head stage.
    head_acts: Vec<Array1<f64>>,
    raw_log_sigma: Array1<f64>,
}

impl Encoder {
    pub fn new(input_dim: usize, latent_dim: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.pointwise.is_empty() || cfg.pointwise.contains(&0) || cfg.head.contains(&0) {
            return Err(Error::Config("encoder widths must be positive and nonempty".into()));
        }
        let mut pointwise = Vec::new();
        let mut w = input_dim;
        for &o in &cfg.pointwise {
            pointwise.push(Dense::new(w, o, rng));
            w = o;
        }
        let mut head = Vec::new();
        for &o in cfg.head.iter().chain(std::iter::once(&(2 * latent_dim))) {
            head.push(Dense::new(w, o, rng));
            w = o;
        }
        Ok(Encoder { pointwise, head })
    }

    pub fn input_dim(&self) -> usize {
        self.pointwise[0].in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.head.last().expect("head nonempty").out_dim() / 2
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<PosteriorGaussian> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(PosteriorGaussian, EncoderCache)> {
        if x.nrows() == 0 {
            return Err(Error::contract("cannot encode an empty point cloud"));
        }
        if x.ncols() != self.input_dim() {
            return Err(Error::contract(format!(
                "cloud has dimension {}, encoder expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut point_acts = vec![x.to_owned()];
        for layer in &self.pointwise {
            let mut h = layer.forward(point_acts.last().unwrap().view());
            h.mapv_inplace(|v| v.max(0.0));
            point_acts.push(h);
        }
        let last = point_acts.last().unwrap();
        let mut pooled = Array1::from_elem(last.ncols(), f64::NEG_INFINITY);
        let mut argmax = vec![0; last.ncols()];
        for (i, row) in last.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > pooled[j] {
                    pooled[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let mut head_acts = Vec::with_capacity(self.head.len());
        let mut v = pooled;
        for (k, layer) in self.head.iter().enumerate() {
            let mut out = layer.forward(v.view().insert_axis(Axis(0))).remove_axis(Axis(0));
            if k + 1 < self.head.len() {
                out.mapv_inplace(|a| a.max(0.0));
            }
            head_acts.push(std::mem::replace(&mut v, out));
        }
        let dz = self.latent_dim();
        let mu = v.slice(ndarray::s![..dz]).to_owned();
        let raw_log_sigma = v.slice(ndarray::s![dz..]).to_owned();
        let sigma = raw_log_sigma.mapv(|l| l.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX).exp());
        Ok((
            PosteriorGaussian { mu, sigma },
            EncoderCache {
                point_acts,
                argmax,
                head_acts,
                raw_log_sigma,
            },
        ))
    }

    /// Accumulate parameter gradients given cotangents of `mu` and of
    /// `log sigma` (zero where the clamp is active).
    pub fn backward(&self, cache: &EncoderCache, g_mu: ArrayView1<f64>, g_log_sigma: ArrayView1<f64>, grad: &mut Encoder) {
        let dz = self.latent_dim();
        let mut g = Array1::zeros(2 * dz);
        g.slice_mut(ndarray::s![..dz]).assign(&g_mu);
        for i in 0..dz {
            let raw = cache.raw_log_sigma[i];
            if (LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&raw) {
                g[dz + i] = g_log_sigma[i];
            }
        }
        for k in (0..self.head.len()).rev() {
            if k + 1 < self.head.len() {
                // ReLU output is the next stage's input.
                Zip::from(&mut g).and(&cache.head_acts[k + 1]).for_each(|gv, &a| {
                    if a <= 0.0 {
                        *gv = 0.0
                    }
                });
            }
            let x = cache.head_acts[k].view().insert_axis(Axis(0));
            g = self.head[k]
                .backward(x, g.view().insert_axis(Axis(0)), &mut grad.head[k])
                .remove_axis(Axis(0));
        }
        let last = cache.point_acts.last().unwrap();
        let mut gh = Array2::zeros(last.raw_dim());
        for (j, &i) in cache.argmax.iter().enumerate() {
            gh[[i, j]] = g[j];
        }
        for k in (0..self.pointwise.len()).rev() {
            Zip::from(&mut gh).and(&cache.point_acts[k + 1]).for_each(|gv, &a| {
                if a <= 0.0 {
                    *gv = 0.0
                }
            });
            let x = cache.point_acts[k].view();
            if k == 0 {
                // Input cotangent is not needed.
                let mut gw = grad.pointwise[0].w.view2_mut();
                ndarray::linalg::general_mat_mul(1.0, &gh.t(), &x, 1.0, &mut gw);
                let gb = gh.sum_axis(Axis(0));
                grad.pointwise[0].b.values_mut().iter_mut().zip(gb.iter()).for_each(|(a, b)| *a += b);
            } else {
                gh = self.pointwise[k].backward(x, gh.view(), &mut grad.pointwise[k]);
            }
        }
    }
}

impl Parameterized for Encoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (i, l) in self.pointwise.iter().enumerate() {
            l.visit_params(&param_join(prefix, &format!("point{i}")), f);
        }
        for (i, l) in self.head.iter().enumerate() {
            l.visit_params(&param_join(prefix, &format!("head{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (i, l) in self.pointwise.iter_mut().enumerate() {
            l.visit_params_mut(&param_join(prefix, &format!("point{i}")), f);
        }
        for (i, l) in self.head.iter_mut().enumerate() {
            l.visit_params_mut(&param_join(prefix, &format!("head{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn small() -> (Encoder, Array2<f64>) {
        let mut rng = crate::rng::seeded(3);
        let cfg = EncoderConfig {
            pointwise: vec![8, 16],
            head: vec![12],
        };
        let enc = Encoder::new(3, 4, &cfg, &mut rng).unwrap();
        let x = Array2::from_shape_fn((20, 3), |_| rng.random_range(-1.0..1.0));
        (enc, x)
    }

    #[test]
    fn output_is_permutation_invariant() {
        let (enc, x) = small();
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        order.shuffle(&mut crate::rng::seeded(1));
        let a = enc.encode(x.view()).unwrap();
        let b = enc.encode(x.select(Axis(0), &order).view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_is_duplication_invariant() {
        let (enc, x) = small();
        let doubled = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        assert_eq!(enc.encode(x.view()).unwrap(), enc.encode(doubled.view()).unwrap());
    }

    #[test]
    fn contract_errors() {
        let (enc, _) = small();
        assert!(matches!(enc.encode(Array2::zeros((0, 3)).view()), Err(Error::Contract(_))));
        assert!(matches!(enc.encode(Array2::zeros((4, 2)).view()), Err(Error::Contract(_))));
    }

    #[test]
    fn log_sigma_is_clamped() {
        let (mut enc, x) = small();
        let last = enc.head.last_mut().unwrap();
        last.b.values_mut()[4..].copy_from_slice(&[50.0, -50.0, 0.0, 0.0]);
        let post = enc.encode(x.view()).unwrap();
        assert_eq!(post.sigma[0], LOG_SIGMA_MAX.exp());
        assert_eq!(post.sigma[1], LOG_SIGMA_MIN.exp());
        assert!(post.sigma.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (enc, x) = small();
        let mut rng = crate::rng::seeded(9);
        let wm: Array1<f64> = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let ws: Array1<f64> = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let loss = |e: &Encoder| {
            let p = e.encode(x.view()).unwrap();
            p.mu.dot(&wm) + p.sigma.mapv(f64::ln).dot(&ws)
        };
        let (_, cache) = enc.forward(x.view()).unwrap();
        let mut grad = enc.zeros_like();
        enc.backward(&cache, wm.view(), ws.view(), &mut grad);
        let flat = enc.flatten();
        let gflat = grad.flatten();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut p = enc.clone();
            let mut fp = flat.clone();
            fp[i] += h;
            p.unflatten(&fp).unwrap();
            let mut m = enc.clone();
            fp[i] -= 2.0 * h;
            m.unflatten(&fp).unwrap();
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let err = (gflat[i] - fd).abs() / gflat[i].abs().max(fd.abs()).max(1e-4);
            assert!(err < 1e-5, "param {i}: {} vs {fd}", gflat[i]);
        }
    }
}
