//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! Values are immutable once recorded; [`Var`] is a cheap index into the
//! tape. [`Tape::backward`] walks the records in reverse and returns the
//! gradient of a scalar loss with respect to every grad-requiring leaf,
//! keyed by parameter name for leaves created with [`Tape::param`].

use std::collections::BTreeMap;

use crate::conv::{conv2d_backward, conv2d_forward, gemm, Conv2dOptions, ConvGeometry};
use crate::error::{mismatch, Result, TensorError};
use crate::tensor::{split_axis, Parameter, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Exact form `x·Φ(x)` with the standard-normal CDF.
    Gelu,
    Silu,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    MulScalar { x: Var, s: Var },
    AddChannelBias { x: Var, bias: Var },
    MulChannel { x: Var, scale: Var },
    Activation(Var, Activation),
    Softmax { x: Var, axis: usize },
    L2Normalize { x: Var, axis: usize, eps: f64 },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Upsample2x(Var),
    Standardize { x: Var, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Recorded forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
    op_counts: BTreeMap<&'static str, u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Creates an empty tape with non-finite detection enabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
            op_counts: BTreeMap::new(),
        }
    }

    /// Toggles the NaN/Inf check run after every primitive.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Arithmetic operation counts per primitive kind.
    ///
    /// Convolutions and matrix products count multiply-accumulates; other
    /// primitives count per-element operations.
    pub fn op_counts(&self) -> &BTreeMap<&'static str, u64> {
        &self.op_counts
    }

    /// Multiply-accumulates spent in convolutions and matrix products.
    pub fn macs(&self) -> u64 {
        ["conv2d", "matmul"]
            .iter()
            .map(|k| self.op_counts.get(k).copied().unwrap_or(0))
            .sum()
    }

    /// Records a value that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Records an unnamed value that takes a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Records a model parameter; trainable parameters take gradients by name.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.push_leaf(p.tensor.clone(), p.trainable, Some(p.name.clone()))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, count: u64) -> Result<Var> {
        let idx = self.nodes.len();
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name, node: idx });
        }
        let requires_grad = parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        *self.op_counts.entry(name).or_insert(0) += count;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(idx))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, "all", format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::Axis { op, axis, rank });
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let n = value.len() as u64;
        self.push(name, value, op, n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| c * v);
        let n = value.len() as u64;
        self.push("scale", value, Op::Scale(x, c), n)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        let n = value.len() as u64;
        self.push("add_scalar", value, Op::AddScalar(x), n)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        let n = value.len() as u64;
        self.push("exp", value, Op::Exp(x), n)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let Some(sv) = self.value(s).item() else {
            return Err(mismatch("mul_scalar", "scalar", format!("{:?} is not one element", self.shape(s))));
        };
        let value = self.value(x).map(|v| v * sv);
        let n = value.len() as u64;
        self.push("mul_scalar", value, Op::MulScalar { x, s }, n)
    }

    /// Channel extent and per-channel plane size for a `[C,H,W]` or `[N,C,H,W]` tensor.
    fn channel_layout(&self, op: &'static str, x: Var, per_channel: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        let (batch, channels, plane) = match *shape {
            [c, h, w] => (1, c, h * w),
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(mismatch(op, "input rank", format!("expected 3 or 4 dims, got {shape:?}"))),
        };
        if self.value(per_channel).len() != channels {
            return Err(mismatch(
                op,
                "channels",
                format!("{} values for {channels} channels", self.value(per_channel).len()),
            ));
        }
        Ok((batch, channels, plane))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, channels, plane) = self.channel_layout("add_channel_bias", x, bias)?;
        let b = self.value(bias).data();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[(i / plane) % channels];
        }
        let n = value.len() as u64;
        self.push("add_channel_bias", value, Op::AddChannelBias { x, bias }, n)
    }

    /// Multiplies every element of channel `c` by `scale[c]`.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (_, channels, plane) = self.channel_layout("mul_channel", x, scale)?;
        let s = self.value(scale).data();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= s[(i / plane) % channels];
        }
        let n = value.len() as u64;
        self.push("mul_channel", value, Op::MulChannel { x, scale }, n)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let f = match kind {
            Activation::Gelu => gelu,
            Activation::Silu => silu,
            Activation::Sigmoid => sigmoid,
        };
        let value = self.value(x).map(f);
        let n = value.len() as u64;
        self.push("activation", value, Op::Activation(x, kind), n)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Softmax along `axis`, stabilized by subtracting each slice's maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let mut value = self.value(x).clone();
        let data = value.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (data[at(k)] - max).exp();
                    data[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    data[at(k)] /= total;
                }
            }
        }
        let n = 3 * value.len() as u64;
        self.push("softmax", value, Op::Softmax { x, axis }, n)
    }

    /// Divides each vector along `axis` by its Euclidean norm plus `eps`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "l2_normalize",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let mut value = self.value(x).clone();
        let data = value.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let norm = (0..len).map(|k| data[at(k)].powi(2)).sum::<f64>().sqrt();
                let denom = norm + eps;
                for k in 0..len {
                    data[at(k)] /= denom;
                }
            }
        }
        let n = 2 * value.len() as u64;
        self.push("l2_normalize", value, Op::L2Normalize { x, axis, eps }, n)
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(mismatch("matmul", "rank", format!("expected two matrices, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(mismatch("matmul", "inner", format!("{sa:?} · {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), (m * k * n) as u64)
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let &[m, n] = self.shape(x) else {
            return Err(mismatch("transpose", "rank", format!("expected a matrix, got {:?}", self.shape(x))));
        };
        let value = transpose_matrix(self.value(x).data(), m, n);
        self.push("transpose", Tensor::from_parts(vec![n, m], value), Op::Transpose(x), (m * n) as u64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), 0)
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                detail: "no inputs".into(),
            });
        };
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let agrees = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(mismatch("concat", "non-concat axes", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let n = out.len() as u64;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push("concat", Tensor::from_parts(shape, out), op, n)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                detail: format!("range {start}..{} invalid for extent {}", start + len, shape[axis]),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let n = out.len() as u64;
        self.push("slice", Tensor::from_parts(new_shape, out), Op::Slice { x, axis, start }, n)
    }

    /// Splits `x` into `n` equal parts along `axis`.
    pub fn chunk(&mut self, x: Var, n: usize, axis: usize) -> Result<Vec<Var>> {
        self.check_axis("chunk", x, axis)?;
        let extent = self.shape(x)[axis];
        if n == 0 || extent % n != 0 {
            return Err(mismatch("chunk", "chunked axis", format!("extent {extent} not divisible into {n} parts")));
        }
        let part = extent / n;
        (0..n).map(|i| self.slice(x, axis, i * part, part)).collect()
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let n = self.value(x).len() as u64;
        self.push("sum", value, Op::Sum(x), n)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        let n = self.value(x).len() as u64;
        self.push("mean", value, Op::Mean(x), n)
    }

    /// 2-D cross-correlation of a `[C,H,W]` or `[N,C,H,W]` input.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), opts)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_channels] {
                return Err(mismatch(
                    "conv2d",
                    "bias",
                    format!("expected [{}], got {:?}", geom.out_channels, self.shape(b)),
                ));
            }
        }
        let out = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let shape = geom.output_shape(self.shape(x).len());
        self.push("conv2d", Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom }, geom.macs())
    }

    /// Nearest-neighbour 2× upsampling of the two trailing axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(mismatch("upsample2x", "input rank", format!("expected 3 or 4 dims, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = self.value(x).len() / (h * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xo] = src[(p * h + y / 2) * w + xo / 2];
                }
            }
        }
        let mut new_shape = shape;
        let r = new_shape.len();
        new_shape[r - 2] *= 2;
        new_shape[r - 1] *= 2;
        let n = out.len() as u64;
        self.push("upsample2x", Tensor::from_parts(new_shape, out), Op::Upsample2x(x), n)
    }

    /// Standardizes the whole tensor to zero mean and unit variance.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let mean = v.mean();
        let var = v.data().iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let value = v.map(|a| (a - mean) * inv);
        let n = 3 * value.len() as u64;
        self.push("standardize", value, Op::Standardize { x, eps }, n)
    }

    /// Gradients of the one-element `loss` with respect to every leaf that
    /// takes a gradient. Registered parameters the loss does not reach get
    /// zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_shape));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut named = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), true) = (&node.param, node.requires_grad) {
                let g = grads[i].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                named
                    .entry(name.clone())
                    .and_modify(|acc: &mut Tensor| acc.add_assign(&g))
                    .or_insert(g);
            }
        }
        Ok(Gradients { grads, named })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| accumulate(grads, &self.nodes, v, t);

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, zip(g, val(*b), |g, y| g * y));
                }
                if wants(*b) {
                    acc(*b, zip(g, val(*a), |g, x| g * x));
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Exp(x) => acc(*x, zip(g, &node.value, |g, y| g * y)),
            Op::MulScalar { x, s } => {
                let sv = val(*s).data()[0];
                if wants(*x) {
                    acc(*x, g.map(|v| v * sv));
                }
                if wants(*s) {
                    let d: f64 = g.data().iter().zip(val(*x).data()).map(|(g, x)| g * x).sum();
                    acc(*s, Tensor::from_parts(val(*s).shape().to_vec(), vec![d]));
                }
            }
            Op::AddChannelBias { x, bias } => {
                acc(*x, g.clone());
                if wants(*bias) {
                    acc(*bias, channel_sums(g, None, val(*bias)));
                }
            }
            Op::MulChannel { x, scale } => {
                let s = val(*scale).data();
                let channels = s.len();
                let plane = plane_size(g.shape());
                if wants(*x) {
                    let mut gx = g.clone();
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        *v *= s[(i / plane) % channels];
                    }
                    acc(*x, gx);
                }
                if wants(*scale) {
                    acc(*scale, channel_sums(g, Some(val(*x)), val(*scale)));
                }
            }
            Op::Activation(x, kind) => {
                let y = &node.value;
                let gx = match kind {
                    Activation::Gelu => zip(g, val(*x), |g, x| g * gelu_grad(x)),
                    Activation::Silu => zip(g, val(*x), |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    }),
                    Activation::Sigmoid => zip(g, y, |g, y| g * y * (1.0 - y)),
                };
                acc(*x, gx);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let mut gx = g.clone();
                let (yd, gd) = (y.data(), g.data());
                let out = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..len {
                            out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::L2Normalize { x, axis, eps } => {
                let xv = val(*x);
                let (outer, len, inner) = split_axis(xv.shape(), *axis);
                let mut gx = g.clone();
                let (xd, gd) = (xv.data(), g.data());
                let out = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let norm = (0..len).map(|k| xd[at(k)].powi(2)).sum::<f64>().sqrt();
                        let denom = norm + eps;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * xd[at(k)]).sum();
                        let coupling = if norm > 0.0 { dot / (norm * denom * denom) } else { 0.0 };
                        for k in 0..len {
                            out[at(k)] = gd[at(k)] / denom - xd[at(k)] * coupling;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::MatMul(a, b) => {
                let (&[m, k], &[_, n]) = (val(*a).shape(), val(*b).shape()) else {
                    unreachable!("matmul operands are matrices")
                };
                if wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n as isize, 1), val(*b).data(), (1, n as isize), 0.0, &mut da);
                    acc(*a, Tensor::from_parts(vec![m, k], da));
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), (1, k as isize), g.data(), (n as isize, 1), 0.0, &mut db);
                    acc(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Transpose(x) => {
                let &[m, n] = val(*x).shape() else { unreachable!("transpose operand is a matrix") };
                acc(*x, Tensor::from_parts(vec![m, n], transpose_matrix(g.data(), n, m)));
            }
            Op::Reshape(x) => acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec())),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let shape = val(v).shape().to_vec();
                    let len = shape[*axis];
                    if wants(v) {
                        let mut part = Vec::with_capacity(val(v).len());
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            part.extend_from_slice(&g.data()[from..from + len * inner]);
                        }
                        acc(v, Tensor::from_parts(shape, part));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape().to_vec();
                let (outer, full, inner) = split_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let from = (o * full + start) * inner;
                    gx[from..from + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Tensor::from_parts(shape, gx));
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, Tensor::full(val(*x).shape(), g.data()[0] / n));
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = (wants(*x), wants(*w), b.is_some_and(wants));
                let grads = conv2d_backward(geom, val(*x).data(), val(*w).data(), g.data(), need);
                if let Some(dx) = grads.input {
                    acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                }
                if let Some(dw) = grads.weight {
                    acc(*w, Tensor::from_parts(val(*w).shape().to_vec(), dw));
                }
                if let (Some(b), Some(db)) = (b, grads.bias) {
                    acc(*b, Tensor::from_parts(val(*b).shape().to_vec(), db));
                }
            }
            Op::Upsample2x(x) => {
                let shape = val(*x).shape().to_vec();
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let planes = val(*x).len() / (h * w);
                let mut gx = vec![0.0; val(*x).len()];
                let gd = g.data();
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xo in 0..2 * w {
                            gx[(p * h + y / 2) * w + xo / 2] += gd[(p * 2 * h + y) * 2 * w + xo];
                        }
                    }
                }
                acc(*x, Tensor::from_parts(shape, gx));
            }
            Op::Standardize { x, eps } => {
                let xv = val(*x);
                let n = xv.len() as f64;
                let mean = xv.mean();
                let var = xv.data().iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let y = &node.value;
                let g_mean = g.mean();
                let gy_mean = g.data().iter().zip(y.data()).map(|(g, y)| g * y).sum::<f64>() / n;
                acc(*x, zip(g, y, |g, y| inv * (g - g_mean - y * gy_mean)));
            }
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Exp(x)
        | Op::Activation(x, _)
        | Op::Transpose(x)
        | Op::Reshape(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Upsample2x(x) => vec![*x],
        Op::Softmax { x, .. } | Op::L2Normalize { x, .. } | Op::Slice { x, .. } | Op::Standardize { x, .. } => {
            vec![*x]
        }
        Op::MulScalar { x, s } => vec![*x, *s],
        Op::AddChannelBias { x, bias } => vec![*x, *bias],
        Op::MulChannel { x, scale } => vec![*x, *scale],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, t: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot => *slot = Some(t),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn plane_size(shape: &[usize]) -> usize {
    shape[shape.len() - 2..].iter().product()
}

/// Per-channel sums of `g` (optionally weighted elementwise by `x`).
fn channel_sums(g: &Tensor, x: Option<&Tensor>, like: &Tensor) -> Tensor {
    let channels = like.len();
    let plane = plane_size(g.shape());
    let mut out = vec![0.0; channels];
    for (i, gv) in g.data().iter().enumerate() {
        let w = x.map_or(1.0, |x| x.data()[i]);
        out[(i / plane) % channels] += gv * w;
    }
    Tensor::from_parts(like.shape().to_vec(), out)
}

fn transpose_matrix(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    out
}

/// Standard-normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient for a grad-requiring leaf, `None` when the loss does not reach it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}
