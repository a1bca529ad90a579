use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A dense trainable tensor stored row-major in 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        ParamTensor {
            shape: shape.to_vec(),
            values: vec![0.0; len],
            requires_grad: true,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.values.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {len} values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter value {bad}")));
        }
        Ok(ParamTensor {
            shape: shape.to_vec(),
            values,
            requires_grad: true,
        })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut t = Self::zeros(shape);
        for v in &mut t.values {
            *v = rng.random_range(-bound..=bound);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[..])
    }

    /// Matrix view; 1-D tensors are viewed as a single column.
    pub fn view2(&self) -> ArrayView2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayView2::from_shape((r, c), &self.values).expect("shape checked at construction")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayViewMut2::from_shape((r, c), &mut self.values).expect("shape checked at construction")
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [r] => (*r, 1),
            [] => (1, 1),
            s => (s[0], s[1..].iter().product()),
        }
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        self.values[0]
    }
}

/// One row of a flattened-parameter manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Anything that owns trainable tensors.
///
/// Visit order defines the flat layout used by the optimizer and by
/// checkpoints, so implementations must visit in a fixed order.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params("", &mut |_, p| out.extend_from_slice(p.values()));
        out
    }

    /// Overwrite all parameters from a flat vector laid out as [`flatten`](Self::flatten).
    fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::contract(format!(
                "flat parameter vector has {} values, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        self.visit_params_mut("", &mut |_, p| {
            let n = p.len();
            p.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Per-entry mask: 1.0 where the owning tensor requires gradients.
    fn grad_mask(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params("", &mut |_, p| {
            let m = if p.requires_grad { 1.0 } else { 0.0 };
            out.extend(std::iter::repeat_n(m, p.len()));
        });
        out
    }

    fn manifest(&self) -> Vec<ParamEntry> {
        let mut out = Vec::new();
        let mut offset = 0;
        self.visit_params("", &mut |name, p| {
            out.push(ParamEntry {
                name: name.to_string(),
                shape: p.shape().to_vec(),
                offset,
            });
            offset += p.len();
        });
        out
    }

    /// A copy with every parameter set to zero, used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_params_mut("", &mut |_, p| p.values_mut().iter_mut().for_each(|v| *v = 0.0));
        z
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
