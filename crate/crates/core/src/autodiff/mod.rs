//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! return [`Var`] handles into the tape; [`Tape::backward`] walks the
//! recorded nodes once in reverse order and accumulates gradients into the
//! leaves that were created with `requires_grad`.
//!
//! Broadcasting is limited to scalar-times-tensor; bias additions have their
//! own primitives so every backward rule stays explicit.

mod check;
mod checkpoint;
mod conv;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use check::{finite_difference_gradient, grad_check, GradCheckReport};
pub use checkpoint::{load_params, save_params, ParamEntry, ParamStore};

/// Dense row-major array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A linear operator applied independently to every `h x w` plane of a
/// `[.., h, w]` tensor. Implementors supply the forward map and its adjoint.
pub trait PlaneMap: Send + Sync + fmt::Debug {
    /// Input plane size `(h, w)`; output planes have the same size.
    fn plane_shape(&self) -> (usize, usize);
    /// Writes `A x` into `out`.
    fn apply(&self, input: &[f64], out: &mut [f64]);
    /// Adds `A^T g` into `grad_in`.
    fn adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]);
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Mean(Var),
    Sum(Var),
    Clip(Var, f64, f64),
    SpatialMean(Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    PlaneMap(Var, Arc<dyn PlaneMap>),
    BceWithLogits(Var, Arc<[f64]>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is confined to one thread; build a fresh tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. Gradients accumulate into it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Moves a leaf tensor (with its gradient) out of the tape.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(shape_err(name, &ta.shape, &tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| f(*x)).collect(),
            requires_grad: false,
            grad: None,
        };
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Scalar times tensor.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| s * x, Op::Scale(a, s))
    }

    /// Tensor plus scalar.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is 1 inside and 0 outside.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clip(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (&[n, k], &[k2, m]) = (ta.shape.as_slice(), tb.shape.as_slice()) else {
            return Err(shape_err("matmul", &ta.shape, &tb.shape));
        };
        if k != k2 {
            return Err(shape_err("matmul", &ta.shape, &tb.shape));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, &ta.data, false, &tb.data, false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng))
    }

    /// `[n, m] + [m]`, the bias repeated on every row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (&[_, m], &[m2]) = (ta.shape.as_slice(), tb.shape.as_slice()) else {
            return Err(shape_err("add_row_bias", &ta.shape, &tb.shape));
        };
        if m != m2 {
            return Err(shape_err("add_row_bias", &ta.shape, &tb.shape));
        }
        let data = ta
            .data
            .chunks(m)
            .flat_map(|row| row.iter().zip(&tb.data).map(|(x, b)| x + b))
            .collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddRowBias(a, bias), ng))
    }

    /// 3x3 convolution, stride 1, zero padding 1:
    /// `[n, c, h, w] * [o, c, 3, 3] -> [n, o, h, w]`.
    pub fn conv2d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (ti, tw) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
        let (&[n, c, h, w], &[o, c2, 3, 3]) = (ti.shape.as_slice(), tw.shape.as_slice()) else {
            return Err(shape_err("conv2d", &ti.shape, &tw.shape));
        };
        if c != c2 {
            return Err(shape_err("conv2d", &ti.shape, &tw.shape));
        }
        let dims = conv::ConvDims { n, c, h, w, o };
        let out = conv::forward(&dims, &ti.data, &tw.data);
        let ng = self.ng(input) || self.ng(weight);
        Ok(self.push(Tensor::new(vec![n, o, h, w], out)?, Op::Conv2d(input, weight), ng))
    }

    /// `[n, c, h, w] + [c]`, one bias per channel.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (&[_, c, h, w], &[c2]) = (ta.shape.as_slice(), tb.shape.as_slice()) else {
            return Err(shape_err("add_channel_bias", &ta.shape, &tb.shape));
        };
        if c != c2 {
            return Err(shape_err("add_channel_bias", &ta.shape, &tb.shape));
        }
        let plane = h * w;
        let data = ta
            .data
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, p)| {
                let b = tb.data[i % c];
                p.iter().map(move |x| x + b)
            })
            .collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddChannelBias(a, bias), ng))
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let &[n, c, h, w] = ta.shape.as_slice() else {
            return Err(Error::Shape(format!("spatial_mean expects 4-d input, got {:?}", ta.shape)));
        };
        let plane = (h * w) as f64;
        let data = ta.data.chunks(h * w).map(|p| p.iter().sum::<f64>() / plane).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::SpatialMean(a), ng))
    }

    /// Concatenates along the channel axis of two `[n, _, h, w]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (&[n, ca, h, w], &[n2, cb, h2, w2]) = (ta.shape.as_slice(), tb.shape.as_slice()) else {
            return Err(shape_err("concat_channels", &ta.shape, &tb.shape));
        };
        if (n, h, w) != (n2, h2, w2) {
            return Err(shape_err("concat_channels", &ta.shape, &tb.shape));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            data.extend_from_slice(&ta.data[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&tb.data[i * sb..(i + 1) * sb]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, ca + cb, h, w], data)?, Op::ConcatChannels(a, b), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.nodes[a.0].value.clone().reshaped(shape)?;
        let out = Tensor {
            grad: None,
            requires_grad: false,
            ..out
        };
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Applies a linear plane operator to every trailing `h x w` plane.
    pub fn plane_map(&mut self, a: Var, map: Arc<dyn PlaneMap>) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (h, w) = map.plane_shape();
        let rank = ta.shape.len();
        if rank < 2 || ta.shape[rank - 2..] != [h, w] {
            return Err(Error::Shape(format!(
                "plane map for {h}x{w} planes applied to {:?}",
                ta.shape
            )));
        }
        let mut out = vec![0.0; ta.data.len()];
        for (src, dst) in ta.data.chunks(h * w).zip(out.chunks_mut(h * w)) {
            map.apply(src, dst);
        }
        let out = Tensor::new(ta.shape.clone(), out)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::PlaneMap(a, map), ng))
    }

    /// Mean binary cross-entropy computed from logits with the stable
    /// `max(l, 0) - l t + ln(1 + e^{-|l|})` form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if tl.data.len() != targets.len() {
            return Err(Error::Shape(format!(
                "bce: {} logits for {} targets",
                tl.data.len(),
                targets.len()
            )));
        }
        if targets.iter().any(|t| *t != 0.0 && *t != 1.0) {
            return Err(Error::InvalidArgument("bce targets must be 0 or 1".into()));
        }
        let total: f64 = tl
            .data
            .iter()
            .zip(targets)
            .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
            .sum();
        let loss = total / targets.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, targets.into()), ng))
    }

    /// Closed-form `KL(N(mu, e^logvar) || N(0, I))`, summed over the last
    /// axis and averaged over the rest:
    /// `1/2 sum (mu^2 + e^logvar - logvar - 1)`.
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let shape = self.shape(mu).to_vec();
        if shape != self.shape(logvar) {
            return Err(shape_err("gaussian_kl", &shape, self.shape(logvar)));
        }
        let rows = if shape.len() > 1 {
            shape[..shape.len() - 1].iter().product::<usize>()
        } else {
            1
        };
        let mu2 = self.mul(mu, mu)?;
        let var = self.exp(logvar);
        let a = self.add(mu2, var)?;
        let b = self.sub(a, logvar)?;
        let c = self.add_scalar(b, -1.0);
        let s = self.sum(c);
        Ok(self.scale(s, 0.5 / rows as f64))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Smallest distance from a ReLU or clip input to its kink; finite
    /// differences are only trustworthy when this exceeds the step size.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let (input, points): (Var, Vec<f64>) = match node.op {
                Op::Relu(a) => (a, vec![0.0]),
                Op::Clip(a, lo, hi) => (a, vec![lo, hi]),
                _ => continue,
            };
            if !self.nodes[input.0].needs_grad {
                continue;
            }
            for x in &self.nodes[input.0].value.data {
                for p in &points {
                    margin = margin.min((x - p).abs());
                }
            }
        }
        margin
    }

    /// Back-propagates from a scalar `loss`, accumulating into every leaf
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument("backward on a value not recorded on this tape".into()));
        }
        if self.nodes[loss.0].value.data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            if let Op::Leaf = op {
                let t = &mut self.nodes[idx].value;
                if t.requires_grad {
                    match &mut t.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => t.grad = Some(g),
                    }
                }
                continue;
            }
            self.backward_op(idx, &op, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_op(&self, idx: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[idx].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.data.len()]);
            f(slot);
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (da, db) = (&val(a).data, &val(b).data);
                acc(a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * db[i];
                    }
                });
                acc(b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * da[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g))
            }
            Op::Relu(a) => {
                let x = &val(a).data;
                acc(a, &|s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &out.data;
                acc(a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &out.data;
                acc(a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = &val(a).data;
                acc(a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                });
            }
            Op::Clip(a, lo, hi) => {
                let x = &val(a).data;
                acc(a, &|s| {
                    for i in 0..s.len() {
                        if x[i] >= lo && x[i] <= hi {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(a, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let k = g[0] / val(a).data.len() as f64;
                acc(a, &|s| s.iter_mut().for_each(|s| *s += k));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // dA = G B^T, dB = A^T G
                acc(a, &|s| gemm(n, m, k, g, false, &tb.data, true, s, 1.0));
                acc(b, &|s| gemm(k, n, m, &ta.data, true, g, false, s, 1.0));
            }
            Op::AddRowBias(a, bias) => {
                acc(a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                let m = val(bias).data.len();
                acc(bias, &|s| {
                    for row in g.chunks(m) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::AddChannelBias(a, bias) => {
                acc(a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                let sh = &val(a).shape;
                let (c, plane) = (sh[1], sh[2] * sh[3]);
                acc(bias, &|s| {
                    for (i, p) in g.chunks(plane).enumerate() {
                        s[i % c] += p.iter().sum::<f64>();
                    }
                });
            }
            Op::Conv2d(input, weight) => {
                let (ti, tw) = (val(input), val(weight));
                let dims = conv::ConvDims {
                    n: ti.shape[0],
                    c: ti.shape[1],
                    h: ti.shape[2],
                    w: ti.shape[3],
                    o: tw.shape[0],
                };
                acc(weight, &|s| conv::backward_weight(&dims, &ti.data, g, s));
                acc(input, &|s| conv::backward_input(&dims, &tw.data, g, s));
            }
            Op::SpatialMean(a) => {
                let sh = &val(a).shape;
                let plane = sh[2] * sh[3];
                let inv = 1.0 / plane as f64;
                acc(a, &|s| {
                    for (i, p) in s.chunks_mut(plane).enumerate() {
                        p.iter_mut().for_each(|v| *v += g[i] * inv);
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (val(a).shape.clone(), val(b).shape.clone());
                let n = sa[0];
                let (la, lb) = (sa[1..].iter().product::<usize>(), sb[1..].iter().product::<usize>());
                acc(a, &|s| {
                    for i in 0..n {
                        let src = &g[i * (la + lb)..i * (la + lb) + la];
                        s[i * la..(i + 1) * la].iter_mut().zip(src).for_each(|(s, g)| *s += g);
                    }
                });
                acc(b, &|s| {
                    for i in 0..n {
                        let src = &g[i * (la + lb) + la..(i + 1) * (la + lb)];
                        s[i * lb..(i + 1) * lb].iter_mut().zip(src).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::PlaneMap(a, ref map) => {
                let (h, w) = map.plane_shape();
                acc(a, &|s| {
                    for (gi, si) in g.chunks(h * w).zip(s.chunks_mut(h * w)) {
                        map.adjoint(gi, si);
                    }
                });
            }
            Op::BceWithLogits(a, ref targets) => {
                let l = &val(a).data;
                let k = g[0] / targets.len() as f64;
                acc(a, &|s| {
                    for i in 0..s.len() {
                        s[i] += k * (sigmoid(l[i]) - targets[i]);
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C = alpha_c C + op(A) op(B)` with `op(A)` of shape `[m, k]` and `op(B)`
/// of shape `[k, n]`; `ta`/`tb` select transposition of the stored
/// row-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta_c: f64,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe row-major buffers of exactly
    // m*k, k*n and m*n elements, which the callers guarantee.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta_c,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests;
