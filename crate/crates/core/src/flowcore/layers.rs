use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::param::{join, ParamTensor, Parameterized};
use super::sigmoid;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `(W_x x + b_x) * sigmoid(W_t t + b_t) + (W_b t + b_b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatSquashLayer {
    pub w_x: ParamTensor,
    pub b_x: ParamTensor,
    pub w_t: ParamTensor,
    pub b_t: ParamTensor,
    pub w_b: ParamTensor,
    pub b_b: ParamTensor,
}

/// Concatsquash layer whose gate and shift also depend on a conditioning
/// vector `z`:
/// `(W_x x + b_x) * sigmoid(W_tt t + W_tz z + b_t) + (W_bt t + W_bz z + b_b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalConcatSquashLayer {
    pub w_x: ParamTensor,
    pub b_x: ParamTensor,
    pub w_tt: ParamTensor,
    pub w_tz: ParamTensor,
    pub b_t: ParamTensor,
    pub w_bt: ParamTensor,
    pub w_bz: ParamTensor,
    pub b_b: ParamTensor,
}

impl ConcatSquashLayer {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        ConcatSquashLayer {
            w_x: ParamTensor::uniform_fan_in(&[output, input], input, rng),
            b_x: ParamTensor::zeros(&[output]),
            w_t: ParamTensor::uniform_fan_in(&[output, 1], 1, rng),
            b_t: ParamTensor::zeros(&[output]),
            w_b: ParamTensor::uniform_fan_in(&[output, 1], 1, rng),
            b_b: ParamTensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        ConcatSquashLayer {
            w_x: ParamTensor::zeros(&[output, input]),
            b_x: ParamTensor::zeros(&[output]),
            w_t: ParamTensor::zeros(&[output, 1]),
            b_t: ParamTensor::zeros(&[output]),
            w_b: ParamTensor::zeros(&[output, 1]),
            b_b: ParamTensor::zeros(&[output]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_x.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w_x.shape()[0]
    }

    /// Check that all six tensors agree on the input/output widths.
    pub fn validate(&self) -> Result<()> {
        let out = self.out_dim();
        let ok = self.w_x.shape().len() == 2
            && self.b_x.shape() == [out]
            && self.w_t.shape() == [out, 1]
            && self.b_t.shape() == [out]
            && self.w_b.shape() == [out, 1]
            && self.b_b.shape() == [out];
        if ok {
            Ok(())
        } else {
            Err(Error::contract("concatsquash tensors have incompatible shapes"))
        }
    }

    /// Evaluate on a single vector.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        SquashLayer::Plain(self.clone()).forward_single(x, t, None)
    }
}

impl ConditionalConcatSquashLayer {
    pub fn new(input: usize, output: usize, cond: usize, rng: &mut Rng) -> Self {
        ConditionalConcatSquashLayer {
            w_x: ParamTensor::uniform_fan_in(&[output, input], input, rng),
            b_x: ParamTensor::zeros(&[output]),
            w_tt: ParamTensor::uniform_fan_in(&[output, 1], 1, rng),
            w_tz: ParamTensor::uniform_fan_in(&[output, cond], cond, rng),
            b_t: ParamTensor::zeros(&[output]),
            w_bt: ParamTensor::uniform_fan_in(&[output, 1], 1, rng),
            w_bz: ParamTensor::uniform_fan_in(&[output, cond], cond, rng),
            b_b: ParamTensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize, cond: usize) -> Self {
        ConditionalConcatSquashLayer {
            w_x: ParamTensor::zeros(&[output, input]),
            b_x: ParamTensor::zeros(&[output]),
            w_tt: ParamTensor::zeros(&[output, 1]),
            w_tz: ParamTensor::zeros(&[output, cond]),
            b_t: ParamTensor::zeros(&[output]),
            w_bt: ParamTensor::zeros(&[output, 1]),
            w_bz: ParamTensor::zeros(&[output, cond]),
            b_b: ParamTensor::zeros(&[output]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_x.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w_x.shape()[0]
    }

    pub fn cond_dim(&self) -> usize {
        self.w_tz.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let out = self.out_dim();
        let dz = self.cond_dim();
        let ok = self.w_x.shape().len() == 2
            && self.b_x.shape() == [out]
            && self.w_tt.shape() == [out, 1]
            && self.w_tz.shape() == [out, dz]
            && self.b_t.shape() == [out]
            && self.w_bt.shape() == [out, 1]
            && self.w_bz.shape() == [out, dz]
            && self.b_b.shape() == [out];
        if ok {
            Ok(())
        } else {
            Err(Error::contract("conditional concatsquash tensors have incompatible shapes"))
        }
    }

    pub fn forward(&self, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>> {
        SquashLayer::Conditional(self.clone()).forward_single(x, t, Some(z))
    }
}

impl Parameterized for ConcatSquashLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&join(prefix, "w_x"), &self.w_x);
        f(&join(prefix, "b_x"), &self.b_x);
        f(&join(prefix, "w_t"), &self.w_t);
        f(&join(prefix, "b_t"), &self.b_t);
        f(&join(prefix, "w_b"), &self.w_b);
        f(&join(prefix, "b_b"), &self.b_b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&join(prefix, "w_x"), &mut self.w_x);
        f(&join(prefix, "b_x"), &mut self.b_x);
        f(&join(prefix, "w_t"), &mut self.w_t);
        f(&join(prefix, "b_t"), &mut self.b_t);
        f(&join(prefix, "w_b"), &mut self.w_b);
        f(&join(prefix, "b_b"), &mut self.b_b);
    }
}

impl Parameterized for ConditionalConcatSquashLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&join(prefix, "w_x"), &self.w_x);
        f(&join(prefix, "b_x"), &self.b_x);
        f(&join(prefix, "w_tt"), &self.w_tt);
        f(&join(prefix, "w_tz"), &self.w_tz);
        f(&join(prefix, "b_t"), &self.b_t);
        f(&join(prefix, "w_bt"), &self.w_bt);
        f(&join(prefix, "w_bz"), &self.w_bz);
        f(&join(prefix, "b_b"), &self.b_b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&join(prefix, "w_x"), &mut self.w_x);
        f(&join(prefix, "b_x"), &mut self.b_x);
        f(&join(prefix, "w_tt"), &mut self.w_tt);
        f(&join(prefix, "w_tz"), &mut self.w_tz);
        f(&join(prefix, "b_t"), &mut self.b_t);
        f(&join(prefix, "w_bt"), &mut self.w_bt);
        f(&join(prefix, "w_bz"), &mut self.w_bz);
        f(&join(prefix, "b_b"), &mut self.b_b);
    }
}

/// Either layer flavour, as stored in a [`DynamicsNet`](super::DynamicsNet).
#[derive(Debug, Clone, PartialEq)]
pub enum SquashLayer {
    Plain(ConcatSquashLayer),
    Conditional(ConditionalConcatSquashLayer),
}

/// Gate and shift vectors of one layer at a fixed `(t, z)`.
#[derive(Debug, Clone)]
pub(crate) struct LayerContext {
    pub gate: Array1<f64>,
    pub shift: Array1<f64>,
}

impl SquashLayer {
    pub fn in_dim(&self) -> usize {
        match self {
            SquashLayer::Plain(l) => l.in_dim(),
            SquashLayer::Conditional(l) => l.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            SquashLayer::Plain(l) => l.out_dim(),
            SquashLayer::Conditional(l) => l.out_dim(),
        }
    }

    pub fn cond_dim(&self) -> Option<usize> {
        match self {
            SquashLayer::Plain(_) => None,
            SquashLayer::Conditional(l) => Some(l.cond_dim()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SquashLayer::Plain(l) => l.validate(),
            SquashLayer::Conditional(l) => l.validate(),
        }
    }

    pub(crate) fn w_x(&self) -> &ParamTensor {
        match self {
            SquashLayer::Plain(l) => &l.w_x,
            SquashLayer::Conditional(l) => &l.w_x,
        }
    }

    pub(crate) fn b_x(&self) -> &ParamTensor {
        match self {
            SquashLayer::Plain(l) => &l.b_x,
            SquashLayer::Conditional(l) => &l.b_x,
        }
    }

    fn grads_x_mut(&mut self) -> (&mut ParamTensor, &mut ParamTensor) {
        match self {
            SquashLayer::Plain(l) => (&mut l.w_x, &mut l.b_x),
            SquashLayer::Conditional(l) => (&mut l.w_x, &mut l.b_x),
        }
    }

    pub(crate) fn check_cond(&self, z: Option<&[f64]>) -> Result<()> {
        match (self, z) {
            (SquashLayer::Plain(_), None) => Ok(()),
            (SquashLayer::Plain(_), Some(_)) => {
                Err(Error::contract("unconditional layer was given a conditioning vector"))
            }
            (SquashLayer::Conditional(_), None) => {
                Err(Error::contract("conditional layer requires a conditioning vector"))
            }
            (SquashLayer::Conditional(l), Some(z)) if z.len() != l.cond_dim() => Err(Error::contract(
                format!("conditioning vector has width {}, layer expects {}", z.len(), l.cond_dim()),
            )),
            _ => Ok(()),
        }
    }

    /// Gate and shift at `(t, z)`. The caller has already validated `z`.
    pub(crate) fn context(&self, t: f64, z: Option<&[f64]>) -> LayerContext {
        let out = self.out_dim();
        let mut logit = Array1::zeros(out);
        let mut shift = Array1::zeros(out);
        match self {
            SquashLayer::Plain(l) => {
                let (wt, bt, wb, bb) = (l.w_t.values(), l.b_t.values(), l.w_b.values(), l.b_b.values());
                for i in 0..out {
                    logit[i] = wt[i] * t + bt[i];
                    shift[i] = wb[i] * t + bb[i];
                }
            }
            SquashLayer::Conditional(l) => {
                let z = z.expect("validated");
                let (wtt, bt, wbt, bb) = (l.w_tt.values(), l.b_t.values(), l.w_bt.values(), l.b_b.values());
                let wtz = l.w_tz.view2();
                let wbz = l.w_bz.view2();
                for i in 0..out {
                    let mut gl = wtt[i] * t + bt[i];
                    let mut sh = wbt[i] * t + bb[i];
                    for (j, zj) in z.iter().enumerate() {
                        gl += wtz[[i, j]] * zj;
                        sh += wbz[[i, j]] * zj;
                    }
                    logit[i] = gl;
                    shift[i] = sh;
                }
            }
        }
        LayerContext {
            gate: logit.mapv(sigmoid),
            shift,
        }
    }

    /// Reverse pass of [`context`](Self::context). Accumulates parameter
    /// gradients into `grad` and returns `(dt, dz)` contributions.
    pub(crate) fn context_backward(
        &self,
        t: f64,
        z: Option<&[f64]>,
        ctx: &LayerContext,
        g_gate: &Array1<f64>,
        g_shift: &Array1<f64>,
        grad: &mut SquashLayer,
        g_z: Option<&mut [f64]>,
    ) -> f64 {
        let out = self.out_dim();
        let g_logit: Array1<f64> =
            Array1::from_shape_fn(out, |i| g_gate[i] * ctx.gate[i] * (1.0 - ctx.gate[i]));
        let mut g_t = 0.0;
        match (self, grad) {
            (SquashLayer::Plain(l), SquashLayer::Plain(g)) => {
                let (wt, wb) = (l.w_t.values(), l.w_b.values());
                for i in 0..out {
                    g.w_t.values_mut()[i] += g_logit[i] * t;
                    g.b_t.values_mut()[i] += g_logit[i];
                    g.w_b.values_mut()[i] += g_shift[i] * t;
                    g.b_b.values_mut()[i] += g_shift[i];
                    g_t += g_logit[i] * wt[i] + g_shift[i] * wb[i];
                }
            }
            (SquashLayer::Conditional(l), SquashLayer::Conditional(g)) => {
                let z = z.expect("validated");
                let (wtt, wbt) = (l.w_tt.values(), l.w_bt.values());
                let dz = z.len();
                {
                    let gwtz = g.w_tz.values_mut();
                    for i in 0..out {
                        for j in 0..dz {
                            gwtz[i * dz + j] += g_logit[i] * z[j];
                        }
                    }
                }
                {
                    let gwbz = g.w_bz.values_mut();
                    for i in 0..out {
                        for j in 0..dz {
                            gwbz[i * dz + j] += g_shift[i] * z[j];
                        }
                    }
                }
                for i in 0..out {
                    g.w_tt.values_mut()[i] += g_logit[i] * t;
                    g.b_t.values_mut()[i] += g_logit[i];
                    g.w_bt.values_mut()[i] += g_shift[i] * t;
                    g.b_b.values_mut()[i] += g_shift[i];
                    g_t += g_logit[i] * wtt[i] + g_shift[i] * wbt[i];
                }
                if let Some(g_z) = g_z {
                    let wtz = l.w_tz.view2();
                    let wbz = l.w_bz.view2();
                    for i in 0..out {
                        for j in 0..dz {
                            g_z[j] += wtz[[i, j]] * g_logit[i] + wbz[[i, j]] * g_shift[i];
                        }
                    }
                }
            }
            _ => panic!("gradient accumulator does not match layer flavour"),
        }
        g_t
    }

    /// Affine part `x W_x^T` (no bias) for a stacked batch.
    pub(crate) fn affine(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w_x().view2().t())
    }

    pub(crate) fn accumulate_wx(&self, grad: &mut SquashLayer, g_a: &ArrayView2<f64>, x: &ArrayView2<f64>, value_rows: usize) {
        let (gw, gb) = grad.grads_x_mut();
        let mut gw = gw.view2_mut();
        ndarray::linalg::general_mat_mul(1.0, &g_a.t(), x, 1.0, &mut gw);
        let gbias = g_a.slice(ndarray::s![..value_rows, ..]).sum_axis(Axis(0));
        for (b, g) in gb.values_mut().iter_mut().zip(gbias.iter()) {
            *b += g;
        }
    }

    pub(crate) fn forward_single(&self, x: &[f64], t: f64, z: Option<&[f64]>) -> Result<Vec<f64>> {
        self.validate()?;
        self.check_cond(z)?;
        if x.len() != self.in_dim() {
            return Err(Error::contract(format!(
                "input has width {}, layer expects {}",
                x.len(),
                self.in_dim()
            )));
        }
        if !t.is_finite() {
            return Err(Error::contract("time must be finite"));
        }
        let ctx = self.context(t, z);
        let w = self.w_x().view2();
        let b = self.b_x().values();
        Ok((0..self.out_dim())
            .map(|i| {
                let a: f64 = (0..x.len()).map(|j| w[[i, j]] * x[j]).sum::<f64>() + b[i];
                a * ctx.gate[i] + ctx.shift[i]
            })
            .collect())
    }
}

impl Parameterized for SquashLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        match self {
            SquashLayer::Plain(l) => l.visit_params(prefix, f),
            SquashLayer::Conditional(l) => l.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        match self {
            SquashLayer::Plain(l) => l.visit_params_mut(prefix, f),
            SquashLayer::Conditional(l) => l.visit_params_mut(prefix, f),
        }
    }
}
