use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng as _;

use super::layers::{ConcatSquashLayer, ConditionalConcatSquashLayer, LayerContext, SquashLayer};
use super::param::{join, ParamTensor, Parameterized};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Velocity field `dy/dt = f(y, t)` or `g(y, t, z)`: a stack of concatsquash
/// layers with `tanh` between layers and nothing after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsNet {
    pub layers: Vec<SquashLayer>,
    conditional: bool,
}

/// Tangent directions pushed through the network alongside the state, used
/// to estimate `Tr(df/dy)` as `weight * sum_k v_k^T (df/dy) v_k`.
///
/// With the unit basis and weight 1 this is the exact trace; with Rademacher
/// directions and weight `1/S` it is the Hutchinson estimator.
#[derive(Debug, Clone)]
pub struct Probes {
    pub dirs: Vec<Array2<f64>>,
    pub weight: f64,
}

impl Probes {
    pub fn none() -> Self {
        Probes {
            dirs: Vec::new(),
            weight: 0.0,
        }
    }

    pub fn exact(rows: usize, dim: usize) -> Self {
        let dirs = (0..dim)
            .map(|k| {
                let mut e = Array2::zeros((rows, dim));
                e.column_mut(k).fill(1.0);
                e
            })
            .collect();
        Probes { dirs, weight: 1.0 }
    }

    pub fn rademacher(rows: usize, dim: usize, samples: usize, rng: &mut Rng) -> Self {
        let dirs = (0..samples)
            .map(|_| Array2::from_shape_simple_fn((rows, dim), || if rng.random::<bool>() { 1.0 } else { -1.0 }))
            .collect();
        Probes {
            dirs,
            weight: 1.0 / samples as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Restrict every direction to a subset of rows.
    pub fn select_rows(&self, rows: &[usize]) -> Probes {
        Probes {
            dirs: self.dirs.iter().map(|d| d.select(Axis(0), rows)).collect(),
            weight: self.weight,
        }
    }
}

/// Result of a vector-Jacobian product through the dynamics.
#[derive(Debug, Clone)]
pub struct DynamicsVjp {
    pub g_y: Array2<f64>,
    pub g_t: f64,
    pub g_z: Option<Vec<f64>>,
}

struct LayerTape {
    input: Array2<f64>,
    affine: Array2<f64>,
    pre_act: Array2<f64>,
    ctx: LayerContext,
}

impl DynamicsNet {
    /// Build a net mapping `dim -> hidden[0] -> ... -> dim`. With `cond`
    /// set, every layer is conditional on a vector of that width.
    pub fn new(dim: usize, hidden: &[usize], cond: Option<usize>, rng: &mut Rng) -> Self {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let layers = widths
            .windows(2)
            .map(|w| match cond {
                Some(dz) => SquashLayer::Conditional(ConditionalConcatSquashLayer::new(w[0], w[1], dz, rng)),
                None => SquashLayer::Plain(ConcatSquashLayer::new(w[0], w[1], rng)),
            })
            .collect();
        DynamicsNet {
            layers,
            conditional: cond.is_some(),
        }
    }

    pub fn from_layers(layers: Vec<SquashLayer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::contract("dynamics net needs at least one layer"))?;
        let conditional = first.cond_dim().is_some();
        for l in &layers {
            l.validate()?;
            if l.cond_dim().is_some() != conditional || l.cond_dim() != first.cond_dim() {
                return Err(Error::contract("mixed conditional and unconditional layers"));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::contract("adjacent layer widths do not chain"));
            }
        }
        if first.in_dim() != layers.last().unwrap().out_dim() {
            return Err(Error::contract("first input width must equal last output width"));
        }
        Ok(DynamicsNet { layers, conditional })
    }

    /// Net whose every parameter is zero: the velocity field vanishes.
    pub fn zeros(dim: usize, hidden: &[usize], cond: Option<usize>) -> Self {
        let mut rng = crate::rng::seeded(0);
        Self::new(dim, hidden, cond, &mut rng).zeros_like()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn is_conditional(&self) -> bool {
        self.conditional
    }

    pub fn cond_dim(&self) -> Option<usize> {
        self.layers[0].cond_dim()
    }

    fn check(&self, y: &ArrayView2<f64>, t: f64, z: Option<&[f64]>) -> Result<()> {
        self.layers[0].check_cond(z)?;
        if y.ncols() != self.dim() {
            return Err(Error::contract(format!(
                "state has width {}, dynamics expect {}",
                y.ncols(),
                self.dim()
            )));
        }
        if !t.is_finite() {
            return Err(Error::contract("time must be finite"));
        }
        Ok(())
    }

    /// Velocity for every row of `y`.
    pub fn eval(&self, y: ArrayView2<f64>, t: f64, z: Option<&[f64]>) -> Result<Array2<f64>> {
        self.check(&y, t, z)?;
        Ok(self.run(y, t, z, &Probes::none(), None).0)
    }

    /// Velocity of a single state vector.
    pub fn eval_vec(&self, y: &[f64], t: f64, z: Option<&[f64]>) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, y.len()), y).map_err(|e| Error::contract(e.to_string()))?;
        Ok(self.eval(view, t, z)?.into_raw_vec_and_offset().0)
    }

    /// Velocity and per-row trace estimate along `probes`.
    pub fn eval_with_trace(
        &self,
        y: ArrayView2<f64>,
        t: f64,
        z: Option<&[f64]>,
        probes: &Probes,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check(&y, t, z)?;
        self.check_probes(&y, probes)?;
        Ok(self.run(y, t, z, probes, None))
    }

    fn check_probes(&self, y: &ArrayView2<f64>, probes: &Probes) -> Result<()> {
        if probes.dirs.iter().any(|d| d.dim() != y.dim()) {
            return Err(Error::contract("probe directions must match the state shape"));
        }
        Ok(())
    }

    /// Reverse pass of [`eval_with_trace`](Self::eval_with_trace): given
    /// cotangents for the velocity and the trace, accumulate parameter
    /// gradients into `grad` and return input/time/conditioning gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn vjp(
        &self,
        y: ArrayView2<f64>,
        t: f64,
        z: Option<&[f64]>,
        probes: &Probes,
        g_f: ArrayView2<f64>,
        g_trace: ArrayView1<f64>,
        grad: &mut DynamicsNet,
    ) -> Result<DynamicsVjp> {
        self.check(&y, t, z)?;
        self.check_probes(&y, probes)?;
        if g_f.dim() != y.dim() || g_trace.len() != y.nrows() {
            return Err(Error::contract("cotangent shapes must match the state"));
        }
        let mut tape = Vec::with_capacity(self.layers.len());
        self.run(y, t, z, probes, Some(&mut tape));

        let n = y.nrows();
        let blocks = probes.len() + 1;
        let dim = self.dim();

        // Cotangent of the stacked final pre-activation: value rows get g_f,
        // tangent block k gets weight * g_trace[row] * v_k[row].
        let mut g_out = Array2::zeros((blocks * n, dim));
        g_out.slice_mut(s![..n, ..]).assign(&g_f);
        for (k, dir) in probes.dirs.iter().enumerate() {
            let mut block = g_out.slice_mut(s![(k + 1) * n..(k + 2) * n, ..]);
            Zip::from(block.rows_mut())
                .and(dir.rows())
                .and(&g_trace)
                .for_each(|mut out, v, &g| {
                    out.zip_mut_with(&v, |o, &vi| *o = probes.weight * g * vi);
                });
        }

        let mut g_t = 0.0;
        let mut g_z = z.map(|z| vec![0.0; z.len()]);
        let mut g_input = Array2::zeros((0, 0));
        for (li, (layer, rec)) in self.layers.iter().zip(tape.iter()).enumerate().rev() {
            // pre_act = affine * gate (+ shift on value rows)
            let mut g_affine = g_out.clone();
            g_affine *= &rec.ctx.gate;
            let mut g_gate = Array1::<f64>::zeros(layer.out_dim());
            Zip::from(g_out.rows())
                .and(rec.affine.rows())
                .for_each(|go, a| Zip::from(&mut g_gate).and(&go).and(&a).for_each(|gg, &x, &y| *gg += x * y));
            let g_shift = g_out.slice(s![..n, ..]).sum_axis(Axis(0));
            g_t += layer.context_backward(
                t,
                z,
                &rec.ctx,
                &g_gate,
                &g_shift,
                &mut grad.layers[li],
                g_z.as_deref_mut(),
            );
            layer.accumulate_wx(&mut grad.layers[li], &g_affine.view(), &rec.input.view(), n);
            let g_in = g_affine.dot(&layer.w_x().view2());

            if li == 0 {
                g_input = g_in.slice(s![..n, ..]).to_owned();
                break;
            }
            // input = act(prev pre-activation): value rows tanh, tangent rows
            // scaled by s = 1 - tanh^2 of the matching value row.
            let prev = &tape[li - 1].pre_act;
            let h = rec.input.slice(s![..n, ..]);
            let slope = h.mapv(|v| 1.0 - v * v);
            let mut g_prev = Array2::zeros(prev.raw_dim());
            let mut g_slope = Array2::<f64>::zeros(slope.raw_dim());
            for k in 1..blocks {
                let rows = s![k * n..(k + 1) * n, ..];
                let gi = g_in.slice(rows);
                Zip::from(&mut g_slope).and(&gi).and(&prev.slice(rows)).for_each(|gs, &a, &b| *gs += a * b);
                Zip::from(g_prev.slice_mut(rows)).and(&gi).and(&slope).for_each(|gp, &a, &sl| *gp = a * sl);
            }
            Zip::from(g_prev.slice_mut(s![..n, ..]))
                .and(&g_in.slice(s![..n, ..]))
                .and(&slope)
                .and(&g_slope)
                .and(&h)
                .for_each(|gp, &gv, &sl, &gs, &hv| *gp = gv * sl - 2.0 * gs * hv * sl);
            g_out = g_prev;
        }
        Ok(DynamicsVjp {
            g_y: g_input,
            g_t,
            g_z,
        })
    }

    fn run(
        &self,
        y: ArrayView2<f64>,
        t: f64,
        z: Option<&[f64]>,
        probes: &Probes,
        mut tape: Option<&mut Vec<LayerTape>>,
    ) -> (Array2<f64>, Array1<f64>) {
        let n = y.nrows();
        let last = self.layers.len() - 1;
        let mut views = vec![y];
        views.extend(probes.dirs.iter().map(|d| d.view()));
        let mut h = concatenate(Axis(0), &views).expect("probe shapes checked");
        for (li, layer) in self.layers.iter().enumerate() {
            let ctx = layer.context(t, z);
            let mut affine = layer.affine(&h.view());
            affine.slice_mut(s![..n, ..]).zip_mut_with(&layer.b_x().view1().broadcast((n, layer.out_dim())).unwrap(), |a, &b| *a += b);
            let mut pre = &affine * &ctx.gate;
            pre.slice_mut(s![..n, ..]).zip_mut_with(&ctx.shift.broadcast((n, layer.out_dim())).unwrap(), |a, &b| *a += b);
            let next = if li < last {
                let mut act = pre.clone();
                act.slice_mut(s![..n, ..]).mapv_inplace(f64::tanh);
                let (vals, mut tangents) = act.view_mut().split_at(Axis(0), n);
                for k in 0..probes.len() {
                    Zip::from(tangents.slice_mut(s![k * n..(k + 1) * n, ..]))
                        .and(&vals)
                        .for_each(|tv, &hv| *tv *= 1.0 - hv * hv);
                }
                Some(act)
            } else {
                None
            };
            let input = std::mem::replace(&mut h, next.unwrap_or_else(|| pre.clone()));
            if let Some(tape) = tape.as_deref_mut() {
                tape.push(LayerTape {
                    input,
                    affine,
                    pre_act: pre,
                    ctx,
                });
            }
        }
        let f = h.slice(s![..n, ..]).to_owned();
        let mut trace = Array1::zeros(n);
        for (k, dir) in probes.dirs.iter().enumerate() {
            let jv = h.slice(s![(k + 1) * n..(k + 2) * n, ..]);
            Zip::from(&mut trace)
                .and(jv.rows())
                .and(dir.rows())
                .for_each(|tr, a, b| *tr += probes.weight * a.dot(&b));
        }
        (f, trace)
    }
}

impl Parameterized for DynamicsNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}
