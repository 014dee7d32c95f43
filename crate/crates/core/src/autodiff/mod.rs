//! Reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node; calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients for every parameter and differentiable leaf it
//! reaches. The op set is exactly what the completion/extrapolation pipeline
//! needs: convolutions (strided / dilated), instance normalization, nearest
//! upsampling, the usual pointwise nonlinearities, channel concatenation,
//! masked products and full reductions.
//!
//! The whole engine is generic over `f32`/`f64`. Training runs in `f32`;
//! gradient-verification tests instantiate the identical code in `f64` so
//! central finite differences are meaningful at tight tolerances.
//!
//! Reductions (sums, means, normalization statistics) accumulate in `f64`
//! regardless of the element type, in a fixed traversal order, so results are
//! reproducible bit-for-bit across runs and thread counts.

pub mod conv;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, ScalarOperand};
use num_traits::Float;

use crate::params::{ParamKey, ParamSet};
pub use conv::ConvGeom;

/// Element type of the engine: `f32` for training, `f64` for verification.
pub trait Real:
    Float
    + ScalarOperand
    + ndarray::LinalgScalar
    + num_traits::NumAssignOps
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<F: Real> {
    /// Constant input; never receives a gradient.
    Leaf,
    /// Differentiable input (used by tests probing d loss / d input).
    Var,
    /// Snapshot of a named parameter. `shape` is the parameter's own shape;
    /// the node value is that tensor viewed as NCHW.
    Param { key: ParamKey, shape: Vec<usize> },
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId>, geom: ConvGeom },
    InstanceNorm { input: NodeId, gamma: NodeId, beta: NodeId },
    Relu { input: NodeId },
    LeakyRelu { input: NodeId, slope: F },
    Tanh { input: NodeId },
    Sigmoid { input: NodeId },
    UpsampleNearest2 { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, k: F },
    /// `k - x` elementwise.
    RsubScalar { input: NodeId },
    Abs { input: NodeId },
    Clamp { input: NodeId, lo: F, hi: F },
    Ln { input: NodeId },
    ConcatCh { a: NodeId, b: NodeId },
    /// Multiply by a constant H×W mask broadcast over batch and channels.
    MulMask2 { input: NodeId, mask: Array2<F> },
    /// Sum of all elements, as a (1,1,1,1) node.
    SumAll { input: NodeId },
    /// Mean over H×W per (batch, channel), as (N,C,1,1).
    GlobalAvgPool { input: NodeId },
}

struct Node<F: Real> {
    value: Array4<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Grads<F: Real> {
    params: BTreeMap<ParamKey, ndarray::ArrayD<F>>,
    vars: BTreeMap<usize, Array4<F>>,
}

impl<F: Real> Grads<F> {
    /// Accumulated gradient for a parameter, if it participated in the loss.
    pub fn param(&self, key: ParamKey) -> Option<&ndarray::ArrayD<F>> {
        self.params.get(&key)
    }

    pub fn params(&self) -> &BTreeMap<ParamKey, ndarray::ArrayD<F>> {
        &self.params
    }

    /// Gradient w.r.t. a `var` leaf.
    pub fn var(&self, id: NodeId) -> Option<&Array4<F>> {
        self.vars.get(&id.0)
    }
}

const IN_EPS: f64 = 1e-5;

/// Instance-norm statistics (mean, 1/std) for one contiguous plane,
/// accumulated in f64.
fn plane_stats<F: Real>(plane: &[F]) -> (f64, f64) {
    let hw = plane.len() as f64;
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for v in plane {
        let x = v.as_f64();
        sum += x;
        sumsq += x * x;
    }
    let mean = sum / hw;
    let var = (sumsq / hw - mean * mean).max(0.0);
    (mean, 1.0 / (var + IN_EPS).sqrt())
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Records a forward computation and differentiates it in reverse.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array4<F> {
        &self.nodes[id.0].value
    }

    /// Value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> F {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar() on non-scalar node of shape {:?}", v.dim());
        v[(0, 0, 0, 0)]
    }

    fn push(&mut self, value: Array4<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input.
    pub fn leaf(&mut self, value: Array4<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn var(&mut self, value: Array4<F>) -> NodeId {
        self.push(value, Op::Var, true)
    }

    /// Scalar constant as a (1,1,1,1) node.
    pub fn scalar_leaf(&mut self, v: F) -> NodeId {
        self.leaf(Array4::from_elem((1, 1, 1, 1), v))
    }

    /// Bind a parameter. The value is snapshotted; a 1-D parameter of length C
    /// is viewed as (1,C,1,1).
    pub fn param(&mut self, params: &ParamSet<F>, key: ParamKey) -> NodeId {
        let arr = params.value(key);
        let shape = arr.shape().to_vec();
        let value: Array4<F> = match shape.len() {
            1 => {
                let c = shape[0];
                arr.to_shape((1, c, 1, 1)).expect("1d param as nchw").to_owned()
            }
            4 => arr
                .to_shape((shape[0], shape[1], shape[2], shape[3]))
                .expect("4d param")
                .to_owned(),
            other => panic!("parameters must be 1-D or 4-D, got {}-D", other),
        };
        self.push(value, Op::Param { key, shape }, true)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    ) -> NodeId {
        let bias_arr: Option<Array1<F>> = bias.map(|b| {
            let v = &self.nodes[b.0].value;
            assert_eq!(v.dim().0, 1);
            Array1::from_iter(v.iter().copied())
        });
        let out = conv::forward(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            bias_arr.as_ref(),
            geom,
        );
        let needs = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { input, weight, bias, geom }, needs)
    }

    /// Instance normalization with affine parameters (both shaped (1,C,1,1)).
    pub fn instance_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dim();
        let gam = &self.nodes[gamma.0].value;
        let bet = &self.nodes[beta.0].value;
        assert_eq!(gam.dim(), (1, c, 1, 1), "gamma shape");
        assert_eq!(bet.dim(), (1, c, 1, 1), "beta shape");
        let mut out = Array4::<F>::zeros((n, c, h, w));
        let hw = h * w;
        let xs = x.as_slice().expect("contiguous input");
        let os = out.as_slice_mut().expect("contiguous output");
        for ni in 0..n {
            for ci in 0..c {
                let plane = &xs[(ni * c + ci) * hw..][..hw];
                let (mean, inv_std) = plane_stats(plane);
                // y = a*x + b with both constants folded once per plane.
                let a = gam[(0, ci, 0, 0)].as_f64() * inv_std;
                let b = bet[(0, ci, 0, 0)].as_f64() - a * mean;
                let (a, b) = (F::from_f64(a), F::from_f64(b));
                let o = &mut os[(ni * c + ci) * hw..][..hw];
                for (ov, xv) in o.iter_mut().zip(plane.iter()) {
                    *ov = a * *xv + b;
                }
            }
        }
        let needs = self.ng(input) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::InstanceNorm { input, gamma, beta }, needs)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.nodes[input.0].value.mapv(|v| v.max(F::zero()));
        let needs = self.ng(input);
        self.push(out, Op::Relu { input }, needs)
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: F) -> NodeId {
        let out = self.nodes[input.0]
            .value
            .mapv(|v| if v > F::zero() { v } else { v * slope });
        let needs = self.ng(input);
        self.push(out, Op::LeakyRelu { input, slope }, needs)
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        let out = self.nodes[input.0].value.mapv(Float::tanh);
        let needs = self.ng(input);
        self.push(out, Op::Tanh { input }, needs)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let one = F::one();
        let out = self.nodes[input.0].value.mapv(|v| {
            // Stable in both tails.
            if v >= F::zero() {
                one / (one + (-v).exp())
            } else {
                let e = v.exp();
                e / (one + e)
            }
        });
        let needs = self.ng(input);
        self.push(out, Op::Sigmoid { input }, needs)
    }

    pub fn upsample_nearest2(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dim();
        let mut out = Array4::<F>::zeros((n, c, h * 2, w * 2));
        let xs = x.as_slice().expect("contiguous input");
        let os = out.as_slice_mut().expect("contiguous output");
        let w2 = 2 * w;
        for p in 0..n * c {
            let src = &xs[p * h * w..][..h * w];
            let dst = &mut os[p * h * w * 4..][..h * w * 4];
            for hi in 0..h {
                let row = &src[hi * w..][..w];
                // Build the doubled row once, then duplicate it.
                let (top, rest) = dst[2 * hi * w2..].split_at_mut(w2);
                for (wi, &v) in row.iter().enumerate() {
                    top[2 * wi] = v;
                    top[2 * wi + 1] = v;
                }
                rest[..w2].copy_from_slice(top);
            }
        }
        let needs = self.ng(input);
        self.push(out, Op::UpsampleNearest2 { input }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, input: NodeId, k: F) -> NodeId {
        let out = self.nodes[input.0].value.mapv(|v| v * k);
        let needs = self.ng(input);
        self.push(out, Op::Scale { input, k }, needs)
    }

    /// `k - x` elementwise (e.g. `1 - p` for probabilities).
    pub fn rsub_scalar(&mut self, input: NodeId, k: F) -> NodeId {
        let out = self.nodes[input.0].value.mapv(|v| k - v);
        let needs = self.ng(input);
        self.push(out, Op::RsubScalar { input }, needs)
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let out = self.nodes[input.0].value.mapv(Float::abs);
        let needs = self.ng(input);
        self.push(out, Op::Abs { input }, needs)
    }

    pub fn clamp(&mut self, input: NodeId, lo: F, hi: F) -> NodeId {
        let out = self.nodes[input.0].value.mapv(|v| v.max(lo).min(hi));
        let needs = self.ng(input);
        self.push(out, Op::Clamp { input, lo, hi }, needs)
    }

    pub fn ln(&mut self, input: NodeId) -> NodeId {
        let out = self.nodes[input.0].value.mapv(Float::ln);
        let needs = self.ng(input);
        self.push(out, Op::Ln { input }, needs)
    }

    /// Concatenate along the channel axis.
    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (n, ca, h, w) = va.dim();
        let (nb, cb, hb, wb) = vb.dim();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial/batch mismatch");
        let mut out = Array4::<F>::zeros((n, ca + cb, h, w));
        out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(va);
        out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(vb);
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCh { a, b }, needs)
    }

    /// Multiply by a constant binary (or real) H×W mask, broadcast over batch
    /// and channel axes.
    pub fn mul_mask2(&mut self, input: NodeId, mask: &Array2<F>) -> NodeId {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dim();
        assert_eq!(mask.dim(), (h, w), "mask spatial mismatch");
        let mut out = x.clone();
        for ni in 0..n {
            for ci in 0..c {
                let mut plane = out.index_axis_mut(ndarray::Axis(0), ni);
                let mut plane = plane.index_axis_mut(ndarray::Axis(0), ci);
                plane.zip_mut_with(mask, |o, m| *o = *o * *m);
            }
        }
        let needs = self.ng(input);
        self.push(out, Op::MulMask2 { input, mask: mask.clone() }, needs)
    }

    /// Sum of every element, returned as a (1,1,1,1) node. Accumulates in f64.
    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let mut acc = 0.0f64;
        for v in self.nodes[input.0].value.iter() {
            acc += v.as_f64();
        }
        let out = Array4::from_elem((1, 1, 1, 1), F::from_f64(acc));
        let needs = self.ng(input);
        self.push(out, Op::SumAll { input }, needs)
    }

    /// Spatial mean per (batch, channel): (N,C,H,W) -> (N,C,1,1).
    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dim();
        let mut out = Array4::<F>::zeros((n, c, 1, 1));
        for ni in 0..n {
            for ci in 0..c {
                let plane = x.index_axis(ndarray::Axis(0), ni);
                let plane = plane.index_axis(ndarray::Axis(0), ci);
                let mut acc = 0.0f64;
                for v in plane.iter() {
                    acc += v.as_f64();
                }
                out[(ni, ci, 0, 0)] = F::from_f64(acc / (h * w) as f64);
            }
        }
        let needs = self.ng(input);
        self.push(out, Op::GlobalAvgPool { input }, needs)
    }

    /// Mean of every element as a scalar node.
    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let len = self.nodes[input.0].value.len();
        let s = self.sum_all(input);
        self.scale(s, F::from_f64(1.0 / len as f64))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Grads<F> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        let mut node_grads: Vec<Option<Array4<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(Array4::from_elem((1, 1, 1, 1), F::one()));
        let mut out = Grads { params: BTreeMap::new(), vars: BTreeMap::new() };

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                node_grads[id] = None;
                continue;
            }
            let Some(g) = node_grads[id].take() else { continue };
            self.backprop_node(id, g, &mut node_grads, &mut out);
        }
        out
    }

    fn accum(&self, slot: &mut Option<Array4<F>>, g: Array4<F>) {
        match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    fn push_grad(&self, grads: &mut [Option<Array4<F>>], target: NodeId, g: Array4<F>) {
        if self.nodes[target.0].needs_grad {
            self.accum(&mut grads[target.0], g);
        }
    }

    fn backprop_node(
        &self,
        id: usize,
        g: Array4<F>,
        grads: &mut Vec<Option<Array4<F>>>,
        out: &mut Grads<F>,
    ) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Var => {
                out.vars
                    .entry(id)
                    .and_modify(|acc| *acc += &g)
                    .or_insert(g);
            }
            Op::Param { key, shape } => {
                let gd = g.into_dyn().to_shape(shape.as_slice()).expect("param grad shape").to_owned();
                out.params
                    .entry(*key)
                    .and_modify(|acc| *acc += &gd)
                    .or_insert(gd);
            }
            Op::Conv2d { input, weight, bias, geom } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (gx, gw, gb) = conv::backward(x, w, &g, bias.is_some(), *geom);
                self.push_grad(grads, *input, gx);
                self.push_grad(grads, *weight, gw);
                if let (Some(bid), Some(gb)) = (bias, gb) {
                    let c = gb.len();
                    let gb4 = gb.into_shape_with_order((1, c, 1, 1)).expect("bias grad");
                    self.push_grad(grads, *bid, gb4);
                }
            }
            Op::InstanceNorm { input, gamma, beta } => {
                let x = &self.nodes[input.0].value;
                let gam = &self.nodes[gamma.0].value;
                let (n, c, h, w) = x.dim();
                let hw = h * w;
                let hwf = hw as f64;
                let mut gx = Array4::<F>::zeros((n, c, h, w));
                let mut ggam = Array4::<F>::zeros((1, c, 1, 1));
                let mut gbet = Array4::<F>::zeros((1, c, 1, 1));
                let xs = x.as_slice().expect("contiguous input");
                let gs = g.as_slice().expect("contiguous grad");
                let gxs = gx.as_slice_mut().expect("contiguous grad_x");
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let xp = &xs[base..base + hw];
                        let gp = &gs[base..base + hw];
                        let (mean, inv_std) = plane_stats(xp);
                        let gm = gam[(0, ci, 0, 0)].as_f64();
                        let mut s1 = 0.0f64; // sum of upstream grad
                        let mut s2 = 0.0f64; // sum of grad * normalized input
                        for (gv, xv) in gp.iter().zip(xp.iter()) {
                            let xn = (xv.as_f64() - mean) * inv_std;
                            s1 += gv.as_f64();
                            s2 += gv.as_f64() * xn;
                        }
                        // dx = A*g + D*(x - mean) + E, constants per plane.
                        let a = gm * inv_std;
                        let dcoef = -a * inv_std * s2 / hwf;
                        let ecoef = -a * s1 / hwf - dcoef * mean;
                        let (af, df, ef) =
                            (F::from_f64(a), F::from_f64(dcoef), F::from_f64(ecoef));
                        let gxp = &mut gxs[base..base + hw];
                        for ((gxv, gv), xv) in gxp.iter_mut().zip(gp.iter()).zip(xp.iter()) {
                            *gxv = af * *gv + df * *xv + ef;
                        }
                        ggam[(0, ci, 0, 0)] += F::from_f64(s2);
                        gbet[(0, ci, 0, 0)] += F::from_f64(s1);
                    }
                }
                self.push_grad(grads, *input, gx);
                self.push_grad(grads, *gamma, ggam);
                self.push_grad(grads, *beta, gbet);
            }
            Op::Relu { input } => {
                let y = &node.value;
                let gx = ndarray::Zip::from(&g).and(y).map_collect(|&gv, &yv| {
                    if yv > F::zero() {
                        gv
                    } else {
                        F::zero()
                    }
                });
                self.push_grad(grads, *input, gx);
            }
            Op::LeakyRelu { input, slope } => {
                let x = &self.nodes[input.0].value;
                let s = *slope;
                let gx = ndarray::Zip::from(&g).and(x).map_collect(|&gv, &xv| {
                    if xv > F::zero() {
                        gv
                    } else {
                        gv * s
                    }
                });
                self.push_grad(grads, *input, gx);
            }
            Op::Tanh { input } => {
                let y = &node.value;
                let gx = ndarray::Zip::from(&g)
                    .and(y)
                    .map_collect(|&gv, &yv| gv * (F::one() - yv * yv));
                self.push_grad(grads, *input, gx);
            }
            Op::Sigmoid { input } => {
                let y = &node.value;
                let gx = ndarray::Zip::from(&g)
                    .and(y)
                    .map_collect(|&gv, &yv| gv * yv * (F::one() - yv));
                self.push_grad(grads, *input, gx);
            }
            Op::UpsampleNearest2 { input } => {
                let (n, c, h2, w2) = node.value.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut gx = Array4::<F>::zeros((n, c, h, w));
                let gs = g.as_slice().expect("contiguous grad");
                let gxs = gx.as_slice_mut().expect("contiguous grad_x");
                for p in 0..n * c {
                    let src = &gs[p * h * w * 4..][..h * w * 4];
                    let dst = &mut gxs[p * h * w..][..h * w];
                    for hi in 0..h {
                        let top = &src[2 * hi * w2..][..w2];
                        let bot = &src[(2 * hi + 1) * w2..][..w2];
                        let out_row = &mut dst[hi * w..][..w];
                        for wi in 0..w {
                            out_row[wi] =
                                top[2 * wi] + top[2 * wi + 1] + bot[2 * wi] + bot[2 * wi + 1];
                        }
                    }
                }
                self.push_grad(grads, *input, gx);
            }
            Op::Add { a, b } => {
                self.push_grad(grads, *a, g.clone());
                self.push_grad(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.push_grad(grads, *a, g.clone());
                self.push_grad(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul { a, b } => {
                let ga = &g * &self.nodes[b.0].value;
                let gb = &g * &self.nodes[a.0].value;
                self.push_grad(grads, *a, ga);
                self.push_grad(grads, *b, gb);
            }
            Op::Scale { input, k } => {
                self.push_grad(grads, *input, g.mapv(|v| v * *k));
            }
            Op::RsubScalar { input } => {
                self.push_grad(grads, *input, g.mapv(|v| -v));
            }
            Op::Abs { input } => {
                let x = &self.nodes[input.0].value;
                let gx = ndarray::Zip::from(&g).and(x).map_collect(|&gv, &xv| {
                    if xv > F::zero() {
                        gv
                    } else if xv < F::zero() {
                        -gv
                    } else {
                        F::zero()
                    }
                });
                self.push_grad(grads, *input, gx);
            }
            Op::Clamp { input, lo, hi } => {
                let x = &self.nodes[input.0].value;
                let (lo, hi) = (*lo, *hi);
                let gx = ndarray::Zip::from(&g).and(x).map_collect(|&gv, &xv| {
                    if xv >= lo && xv <= hi {
                        gv
                    } else {
                        F::zero()
                    }
                });
                self.push_grad(grads, *input, gx);
            }
            Op::Ln { input } => {
                let x = &self.nodes[input.0].value;
                let gx = ndarray::Zip::from(&g).and(x).map_collect(|&gv, &xv| gv / xv);
                self.push_grad(grads, *input, gx);
            }
            Op::ConcatCh { a, b } => {
                let ca = self.nodes[a.0].value.dim().1;
                let ga = g.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
                let gb = g.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                self.push_grad(grads, *a, ga);
                self.push_grad(grads, *b, gb);
            }
            Op::MulMask2 { input, mask } => {
                let (n, c, _, _) = g.dim();
                let mut gx = g;
                for ni in 0..n {
                    for ci in 0..c {
                        let mut plane = gx.index_axis_mut(ndarray::Axis(0), ni);
                        let mut plane = plane.index_axis_mut(ndarray::Axis(0), ci);
                        plane.zip_mut_with(mask, |o, m| *o = *o * *m);
                    }
                }
                self.push_grad(grads, *input, gx);
            }
            Op::SumAll { input } => {
                let k = g[(0, 0, 0, 0)];
                let dim = self.nodes[input.0].value.dim();
                self.push_grad(grads, *input, Array4::from_elem(dim, k));
            }
            Op::GlobalAvgPool { input } => {
                let (n, c, h, w) = self.nodes[input.0].value.dim();
                let inv = F::from_f64(1.0 / (h * w) as f64);
                let mut gx = Array4::<F>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g[(ni, ci, 0, 0)] * inv;
                        gx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(gv);
                    }
                }
                self.push_grad(grads, *input, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(dim, || rng.gen_range(-1.0..1.0))
    }

    /// Composite graph covering most ops, differentiated against central FD.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::<f64>::new();
        let w = params.add(
            "w",
            ArrayD::from_shape_simple_fn(IxDyn(&[3, 2, 3, 3]), || rng.gen_range(-0.5..0.5)),
        );
        let b = params.add("b", ArrayD::from_shape_simple_fn(IxDyn(&[3]), || rng.gen_range(-0.1..0.1)));
        let gamma = params.add("gamma", ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let beta = params.add("beta", ArrayD::from_elem(IxDyn(&[3]), 0.0));
        let x = rand4(&mut rng, (2, 2, 6, 6));
        let mask = Array2::from_shape_simple_fn((6, 6), || if rng.gen_bool(0.5) { 1.0 } else { 0.0 });

        let eval = |ps: &ParamSet<f64>| -> (Tape<f64>, NodeId, NodeId) {
            let mut t = Tape::new();
            let xin = t.var(x.clone());
            let wid = t.param(ps, w);
            let bid = t.param(ps, b);
            let gid = t.param(ps, gamma);
            let betid = t.param(ps, beta);
            let c = t.conv2d(xin, wid, Some(bid), ConvGeom { stride: 1, pad: 2, dilation: 2 });
            let nrm = t.instance_norm(c, gid, betid);
            let r = t.leaky_relu(nrm, 0.2);
            let u = t.upsample_nearest2(r);
            let th = t.tanh(u);
            let sg = t.sigmoid(th);
            let cl = t.clamp(sg, 1e-7, 1.0 - 1e-7);
            let ln = t.ln(cl);
            let ab = t.abs(ln);
            let sc = t.scale(ab, 0.5);
            let rs = t.rsub_scalar(sc, 2.0);
            let loss = t.mean_all(rs);
            (t, loss, xin)
        };

        let (tape, loss, xin) = eval(&params);
        let grads = tape.backward(loss);

        let h = 1e-6;
        for (key, name) in [(w, "w"), (b, "b"), (gamma, "gamma"), (beta, "beta")] {
            let g = grads.param(key).unwrap().clone();
            let flat_len = params.value(key).len();
            for probe in [0, flat_len / 2, flat_len - 1] {
                let orig = params.value(key).as_slice().unwrap()[probe];
                params.value_mut(key).as_slice_mut().unwrap()[probe] = orig + h;
                let (tp, lp, _) = eval(&params);
                let fp = tp.scalar(lp);
                params.value_mut(key).as_slice_mut().unwrap()[probe] = orig - h;
                let (tm, lm, _) = eval(&params);
                let fm = tm.scalar(lm);
                params.value_mut(key).as_slice_mut().unwrap()[probe] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let ad = g.as_slice().unwrap()[probe];
                assert!(
                    (fd - ad).abs() < 1e-7 * (1.0 + fd.abs().max(ad.abs())) * 100.0,
                    "{name}[{probe}]: fd {fd} ad {ad}"
                );
            }
        }

        // Input gradient via the same FD.
        let gx = grads.var(xin).unwrap();
        let idx = (1, 0, 3, 2);
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        let f = |xv: Array4<f64>| {
            let mut t = Tape::new();
            let xin = t.var(xv);
            let wid = t.param(&params, w);
            let bid = t.param(&params, b);
            let gid = t.param(&params, gamma);
            let betid = t.param(&params, beta);
            let c = t.conv2d(xin, wid, Some(bid), ConvGeom { stride: 1, pad: 2, dilation: 2 });
            let nrm = t.instance_norm(c, gid, betid);
            let r = t.leaky_relu(nrm, 0.2);
            let u = t.upsample_nearest2(r);
            let th = t.tanh(u);
            let sg = t.sigmoid(th);
            let cl = t.clamp(sg, 1e-7, 1.0 - 1e-7);
            let ln = t.ln(cl);
            let ab = t.abs(ln);
            let sc = t.scale(ab, 0.5);
            let rs = t.rsub_scalar(sc, 2.0);
            let loss = t.mean_all(rs);
            t.scalar(loss)
        };
        let fd = (f(xp) - f(xm)) / (2.0 * h);
        assert!((fd - gx[idx]).abs() < 1e-8 + 1e-5 * fd.abs(), "x fd {} ad {}", fd, gx[idx]);

        let _ = mask; // mask ops covered in masked_ops_grads below
    }

    #[test]
    fn masked_ops_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand4(&mut rng, (2, 3, 4, 4));
        let y = rand4(&mut rng, (2, 3, 4, 4));
        let mask =
            Array2::from_shape_simple_fn((4, 4), || if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let f = |xv: Array4<f64>| -> (f64, Option<Array4<f64>>) {
            let mut t = Tape::new();
            let a = t.var(xv);
            let b = t.leaf(y.clone());
            let d = t.sub(a, b);
            let ab = t.abs(d);
            let m = t.mul_mask2(ab, &mask);
            let cat = t.concat_ch(m, a);
            let p = t.global_avg_pool(cat);
            let s = t.sum_all(p);
            let loss = t.scale(s, 0.25);
            let g = t.backward(loss);
            (t.scalar(loss), g.var(a).cloned())
        };
        let (_, g) = f(x.clone());
        let g = g.unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 2, 3, 3), (0, 1, 2, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(xp).0 - f(xm).0) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-8, "at {:?}: fd {} ad {}", idx, fd, g[idx]);
        }
    }

    #[test]
    fn shared_param_grads_accumulate() {
        // Using one weight twice must sum both contributions.
        let mut params = ParamSet::<f64>::new();
        let w = params.add("w", ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 0.7));
        let x = Array4::from_elem((1, 1, 2, 2), 2.0);
        let mut t = Tape::new();
        let xin = t.leaf(x);
        let wid1 = t.param(&params, w);
        let wid2 = t.param(&params, w);
        let g = ConvGeom { stride: 1, pad: 0, dilation: 1 };
        let c1 = t.conv2d(xin, wid1, None, g);
        let c2 = t.conv2d(c1, wid2, None, g);
        let loss = t.sum_all(c2);
        // loss = sum(w * w * x) = w^2 * 8 -> dloss/dw = 2w*8 = 11.2
        let grads = t.backward(loss);
        let got = grads.param(w).unwrap()[[0, 0, 0, 0]];
        assert!((got - 11.2).abs() < 1e-12, "got {}", got);
    }

    #[test]
    fn sigmoid_is_stable_in_tails() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Array4::from_shape_vec((1, 1, 1, 3), vec![-100.0, 0.0, 100.0]).unwrap());
        let s = t.sigmoid(x);
        let v = t.value(s);
        assert!(v[(0, 0, 0, 0)] >= 0.0 && v[(0, 0, 0, 0)] < 1e-20);
        assert_eq!(v[(0, 0, 0, 1)], 0.5);
        assert_eq!(v[(0, 0, 0, 2)], 1.0);
    }
}
