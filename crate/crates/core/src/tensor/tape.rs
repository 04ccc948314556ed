use super::kernels::{self, Conv2dGeometry, NormCenter, NormScale};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Right-hand operand of an elementwise binary op.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rhs {
    Tensor(Var),
    Scalar(f64),
}

impl From<Var> for Rhs {
    fn from(v: Var) -> Self {
        Rhs::Tensor(v)
    }
}

impl From<f64> for Rhs {
    fn from(s: f64) -> Self {
        Rhs::Scalar(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Tanh,
    Relu,
    Exp,
    Log,
    Abs,
    Sign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Population variance: divides by the reduced element count.
    VarBiased,
    Min,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { op: BinaryOp, a: Var, b: Var },
    BinaryScalar { op: BinaryOp, a: Var, s: f64 },
    Unary { op: UnaryOp, a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    MatMul { a: Var, b: Var },
    Reduce { kind: ReduceKind, a: Var, map: ReduceMap, aux: Vec<f64> },
    AxisBinary { op: BinaryOp, a: Var, v: Var, axis: usize },
    Reshape { a: Var },
    Conv2d { x: Var, w: Var, geom: Conv2dGeometry, filters: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: Conv2dGeometry },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Margin { logits: Var, labels: Vec<usize>, runner_up: Vec<usize> },
    ChannelNorm { x: Var, saved: kernels::ChannelNormSaved },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Maps every input element to the output slot it reduces into.
#[derive(Debug, Clone)]
struct ReduceMap {
    out_index: Vec<usize>,
    count: usize,
}

impl ReduceMap {
    fn new(shape: &[usize], axes: &[usize]) -> (Self, Vec<usize>) {
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &s)| s)
            .collect();
        // Output strides expressed per input axis; reduced axes contribute 0.
        let mut strides = vec![0usize; shape.len()];
        let mut acc = 1;
        for d in (0..shape.len()).rev() {
            if !axes.contains(&d) {
                strides[d] = acc;
                acc *= shape[d];
            }
        }
        let total: usize = shape.iter().product();
        let mut out_index = Vec::with_capacity(total);
        let last = shape.len() - 1;
        let (run, run_stride) = (shape[last], strides[last]);
        let mut idx = vec![0usize; last];
        let mut cur = 0usize;
        for _ in 0..total / run.max(1) {
            out_index.extend((0..run).map(|j| cur + j * run_stride));
            for d in (0..last).rev() {
                idx[d] += 1;
                cur += strides[d];
                if idx[d] < shape[d] {
                    break;
                }
                cur -= strides[d] * shape[d];
                idx[d] = 0;
            }
        }
        let count = axes.iter().map(|&a| shape[a]).product();
        (ReduceMap { out_index, count }, out_shape)
    }
}

/// Records tensor operations in evaluation order and replays them backwards
/// to accumulate gradients.
///
/// A tape is a single-use training context: build the graph, call
/// [`Tape::backward`] once, read gradients, and either drop the tape or call
/// [`Tape::reset_grads`] before differentiating again.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
        BinaryOp::Pow => "pow",
    }
}

fn unary_name(op: UnaryOp) -> &'static str {
    match op {
        UnaryOp::Neg => "neg",
        UnaryOp::Tanh => "tanh",
        UnaryOp::Relu => "relu",
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
        UnaryOp::Abs => "abs",
        UnaryOp::Sign => "sign",
    }
}

fn apply_binary(op: BinaryOp, a: f64, b: f64) -> f64 {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
        BinaryOp::Pow => a.powf(b),
    }
}

/// `sign(0) == 0`, unlike `f64::signum`.
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    /// Records an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Records a differentiable input.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.set_grad(None);
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn derived(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(op_name, &data)?;
        let requires_grad = inputs.iter().any(|&v| self.needs_grad(v));
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        Ok(self.push(value, op))
    }

    // ----- elementwise -------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, rhs: impl Into<Rhs>) -> Result<Var> {
        let name = binary_name(op);
        match rhs.into() {
            Rhs::Scalar(s) => {
                if op == BinaryOp::Div && s == 0.0 {
                    return Err(Error::DivisionByZero { op: name });
                }
                let av = self.value(a);
                let data = av.data().iter().map(|&x| apply_binary(op, x, s)).collect();
                let shape = av.shape().to_vec();
                self.derived(name, shape, data, &[a], Op::BinaryScalar { op, a, s })
            }
            Rhs::Tensor(b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if av.shape() != bv.shape() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        lhs: av.shape().to_vec(),
                        rhs: bv.shape().to_vec(),
                    });
                }
                if op == BinaryOp::Div && bv.data().contains(&0.0) {
                    return Err(Error::DivisionByZero { op: name });
                }
                let data = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| apply_binary(op, x, y))
                    .collect();
                let shape = av.shape().to_vec();
                self.derived(name, shape, data, &[a, b], Op::Binary { op, a, b })
            }
        }
    }

    pub fn add(&mut self, a: Var, rhs: impl Into<Rhs>) -> Result<Var> {
        self.binary(BinaryOp::Add, a, rhs)
    }

    pub fn sub(&mut self, a: Var, rhs: impl Into<Rhs>) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, rhs)
    }

    pub fn mul(&mut self, a: Var, rhs: impl Into<Rhs>) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, rhs)
    }

    pub fn div(&mut self, a: Var, rhs: impl Into<Rhs>) -> Result<Var> {
        self.binary(BinaryOp::Div, a, rhs)
    }

    pub fn pow(&mut self, a: Var, rhs: impl Into<Rhs>) -> Result<Var> {
        self.binary(BinaryOp::Pow, a, rhs)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Neg => |x| -x,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Relu => |x| if x > 0.0 { x } else { 0.0 },
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Abs => f64::abs,
            UnaryOp::Sign => sign,
        };
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        self.derived(unary_name(op), shape, data, &[a], Op::Unary { op, a })
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn sign(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sign, a)
    }

    /// Elementwise clamp; gradient passes only where `lo < x < hi`.
    /// Either bound may be infinite.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::InvalidParameter(format!("clamp bounds [{lo}, {hi}]")));
        }
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let shape = av.shape().to_vec();
        self.derived("clamp", shape, data, &[a], Op::Clamp { a, lo, hi })
    }

    // ----- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        self.derived("matmul", vec![m, n], out, &[a, b], Op::MatMul { a, b })
    }

    // ----- reductions --------------------------------------------------

    /// Reduces over `axes`, removing them from the shape.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() || sorted.len() != axes.len() || sorted.iter().any(|&d| d >= shape.len()) {
            return Err(Error::InvalidShape {
                op: "reduce",
                reason: format!("invalid axes {axes:?} for shape {shape:?}"),
            });
        }
        if sorted.iter().any(|&d| shape[d] == 0) {
            return Err(Error::EmptyReduction { op: "reduce" });
        }
        let (map, out_shape) = ReduceMap::new(&shape, &sorted);
        let out_len: usize = out_shape.iter().product();
        let x = self.value(a).data();
        let mut aux = Vec::new();
        let out = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut acc = vec![0.0; out_len];
                for (v, &o) in x.iter().zip(&map.out_index) {
                    acc[o] += v;
                }
                if kind == ReduceKind::Mean {
                    let m = map.count as f64;
                    acc.iter_mut().for_each(|v| *v /= m);
                }
                acc
            }
            ReduceKind::VarBiased => {
                let m = map.count as f64;
                let mut mean = vec![0.0; out_len];
                for (v, &o) in x.iter().zip(&map.out_index) {
                    mean[o] += v;
                }
                mean.iter_mut().for_each(|v| *v /= m);
                let mut var = vec![0.0; out_len];
                for (v, &o) in x.iter().zip(&map.out_index) {
                    let d = v - mean[o];
                    var[o] += d * d;
                }
                var.iter_mut().for_each(|v| *v /= m);
                aux = mean;
                var
            }
            ReduceKind::Min | ReduceKind::Max => {
                let mut best = vec![f64::NAN; out_len];
                let mut arg = vec![usize::MAX; out_len];
                for (i, (&v, &o)) in x.iter().zip(&map.out_index).enumerate() {
                    let better = match kind {
                        ReduceKind::Min => v < best[o],
                        _ => v > best[o],
                    };
                    if arg[o] == usize::MAX || better {
                        best[o] = v;
                        arg[o] = i;
                    }
                }
                aux = arg.into_iter().map(|i| i as f64).collect();
                best
            }
        };
        self.derived("reduce", out_shape, out, &[a], Op::Reduce { kind, a, map, aux })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.reduce(ReduceKind::Sum, a, &axes)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.reduce(ReduceKind::Mean, a, &axes)
    }

    /// Combines `a` with a vector `v` laid along `axis` of `a`
    /// (`v.len() == a.shape()[axis]`).
    pub fn axis_binary(&mut self, op: BinaryOp, a: Var, v: Var, axis: usize) -> Result<Var> {
        let name = binary_name(op);
        if op == BinaryOp::Pow {
            return Err(Error::InvalidParameter("axis_binary does not support pow".into()));
        }
        let (av, vv) = (self.value(a), self.value(v));
        let shape = av.shape().to_vec();
        if axis >= shape.len() || vv.rank() != 1 || vv.len() != shape[axis] {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: shape,
                rhs: vv.shape().to_vec(),
            });
        }
        if op == BinaryOp::Div && vv.data().contains(&0.0) {
            return Err(Error::DivisionByZero { op: name });
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = av.data().to_vec();
        fn apply(out: &mut [f64], inner: usize, v: &[f64], f: impl Fn(f64, f64) -> f64) {
            for (chunk_idx, chunk) in out.chunks_mut(inner).enumerate() {
                let c = v[chunk_idx % v.len()];
                for x in chunk {
                    *x = f(*x, c);
                }
            }
        }
        let inner = inner.max(1);
        match op {
            BinaryOp::Add => apply(&mut out, inner, vv.data(), |a, b| a + b),
            BinaryOp::Sub => apply(&mut out, inner, vv.data(), |a, b| a - b),
            BinaryOp::Mul => apply(&mut out, inner, vv.data(), |a, b| a * b),
            BinaryOp::Div => apply(&mut out, inner, vv.data(), |a, b| a / b),
            BinaryOp::Pow => unreachable!("rejected above"),
        }
        self.derived(name, shape, out, &[a, v], Op::AxisBinary { op, a, v, axis })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: av.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = av.data().to_vec();
        self.derived("reshape", shape.to_vec(), data, &[a], Op::Reshape { a })
    }

    /// Per-channel `(x - centre) / scale` for `[N, C]` or `[N, C, H, W]`
    /// input, reducing over every axis except 1. Batch-derived centres and
    /// scales are differentiated through; fixed ones are constants.
    pub fn channel_normalize(&mut self, x: Var, center: NormCenter, scale: NormScale) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if !(shape.len() == 2 || shape.len() == 4) {
            return Err(Error::InvalidShape {
                op: "channel_normalize",
                reason: format!("expected [N, C] or [N, C, H, W], got {shape:?}"),
            });
        }
        let c = shape[1];
        let fixed_len = |v: &Vec<f64>| v.len() != c;
        if matches!(&center, NormCenter::Fixed(v) if fixed_len(v)) || matches!(&scale, NormScale::Fixed(v) if fixed_len(v)) {
            return Err(Error::ShapeMismatch {
                op: "channel_normalize",
                lhs: shape,
                rhs: vec![c],
            });
        }
        if matches!(scale, NormScale::BatchStd { .. }) && center != NormCenter::Batch {
            return Err(Error::InvalidParameter("a batch standard deviation needs the batch centre".into()));
        }
        let count = shape[0] * shape[2..].iter().product::<usize>();
        if count == 0 {
            return Err(Error::EmptyReduction { op: "channel_normalize" });
        }
        let (out, saved) = kernels::channel_norm_forward(xv.data(), &shape, &center, &scale);
        if saved.scale.contains(&0.0) {
            return Err(Error::DivisionByZero { op: "channel_normalize" });
        }
        self.derived("channel_normalize", shape, out, &[x], Op::ChannelNorm { x, saved })
    }

    // ----- convolution and pooling -------------------------------------

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        let geom = Conv2dGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
        };
        if !geom.valid() {
            return Err(Error::InvalidShape {
                op: "conv2d",
                reason: format!("kernel {ws:?} does not fit input {xs:?} with padding {padding}"),
            });
        }
        let filters = ws[0];
        let out = kernels::conv2d_forward(self.value(x).data(), xs[0], self.value(w).data(), filters, &geom);
        let shape = vec![xs[0], filters, geom.out_height(), geom.out_width()];
        self.derived("conv2d", shape, out, &[x, w], Op::Conv2d { x, w, geom, filters })
    }

    fn pool_geometry(&self, op: &'static str, x: Var, kernel: usize, stride: usize) -> Result<Conv2dGeometry> {
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(Error::InvalidShape { op, reason: format!("expected [N, C, H, W], got {xs:?}") });
        }
        let geom = Conv2dGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding: 0,
        };
        if !geom.valid() {
            return Err(Error::InvalidShape { op, reason: format!("window {kernel} larger than input {xs:?}") });
        }
        Ok(geom)
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geometry("max_pool2d", x, kernel, stride)?;
        let n = self.value(x).shape()[0];
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), n, &geom);
        let shape = vec![n, geom.channels, geom.out_height(), geom.out_width()];
        self.derived("max_pool2d", shape, out, &[x], Op::MaxPool { x, argmax })
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geometry("avg_pool2d", x, kernel, stride)?;
        let n = self.value(x).shape()[0];
        let out = kernels::avg_pool_forward(self.value(x).data(), n, &geom);
        let shape = vec![n, geom.channels, geom.out_height(), geom.out_width()];
        self.derived("avg_pool2d", shape, out, &[x], Op::AvgPool { x, geom })
    }

    // ----- classification heads ----------------------------------------

    fn check_logits(&self, op: &'static str, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let ls = self.value(logits).shape();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::ShapeMismatch { op, lhs: ls.to_vec(), rhs: vec![labels.len()] });
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        Ok((n, k))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilised by
    /// subtracting each row's maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.check_logits("cross_entropy", logits, labels)?;
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0;
        for (row, &y) in z.chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_sum = sum.ln();
            total += log_sum - (row[y] - max);
            probs.extend(row.iter().map(|&v| (v - max).exp() / sum));
        }
        let loss = total / n as f64;
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        self.derived("cross_entropy", Vec::new(), vec![loss], &[logits], op)
    }

    /// Per-row `Z[y] - max_{k != y} Z[k]`; shape `[N]`.
    pub fn margin(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (_, k) = self.check_logits("margin", logits, labels)?;
        if k < 2 {
            return Err(Error::InvalidShape { op: "margin", reason: "needs at least two classes".into() });
        }
        let z = self.value(logits).data();
        let mut out = Vec::with_capacity(labels.len());
        let mut runner_up = Vec::with_capacity(labels.len());
        for (row, &y) in z.chunks_exact(k).zip(labels) {
            let mut best = usize::MAX;
            for (j, &v) in row.iter().enumerate() {
                if j != y && (best == usize::MAX || v > row[best]) {
                    best = j;
                }
            }
            out.push(row[y] - row[best]);
            runner_up.push(best);
        }
        let shape = vec![labels.len()];
        let op = Op::Margin { logits, labels: labels.to_vec(), runner_up };
        self.derived("margin", shape, out, &[logits], op)
    }

    // ----- backward ----------------------------------------------------

    /// Fills the gradient slot of every differentiable leaf with
    /// `d loss / d leaf`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.requires_grad() {
            return Err(Error::NoDifferentiableLeaves);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.set_grad(Some(g));
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { op, a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.needs_grad(*a) {
                    let ga = accumulate(&mut grads[a.0], x.len());
                    for j in 0..x.len() {
                        ga[j] += g[j]
                            * match op {
                                BinaryOp::Add | BinaryOp::Sub => 1.0,
                                BinaryOp::Mul => y[j],
                                BinaryOp::Div => 1.0 / y[j],
                                BinaryOp::Pow => y[j] * x[j].powf(y[j] - 1.0),
                            };
                    }
                }
                if self.needs_grad(*b) {
                    let gb = accumulate(&mut grads[b.0], y.len());
                    for j in 0..y.len() {
                        gb[j] += g[j]
                            * match op {
                                BinaryOp::Add => 1.0,
                                BinaryOp::Sub => -1.0,
                                BinaryOp::Mul => x[j],
                                BinaryOp::Div => -x[j] / (y[j] * y[j]),
                                BinaryOp::Pow => out[j] * x[j].ln(),
                            };
                    }
                }
            }
            Op::BinaryScalar { op, a, s } => {
                let x = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], x.len());
                for j in 0..x.len() {
                    ga[j] += g[j]
                        * match op {
                            BinaryOp::Add | BinaryOp::Sub => 1.0,
                            BinaryOp::Mul => *s,
                            BinaryOp::Div => 1.0 / s,
                            BinaryOp::Pow => s * x[j].powf(s - 1.0),
                        };
                }
            }
            Op::Unary { op, a } => {
                let x = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], x.len());
                for j in 0..x.len() {
                    ga[j] += g[j]
                        * match op {
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Tanh => 1.0 - out[j] * out[j],
                            UnaryOp::Relu => f64::from(u8::from(x[j] > 0.0)),
                            UnaryOp::Exp => out[j],
                            UnaryOp::Log => 1.0 / x[j],
                            UnaryOp::Abs => sign(x[j]),
                            UnaryOp::Sign => 0.0,
                        };
                }
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], x.len());
                for j in 0..x.len() {
                    if *lo < x[j] && x[j] < *hi {
                        ga[j] += g[j];
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs_grad(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    kernels::gemm(m, n, k, g, false, bv.data(), true, ga, true);
                }
                if self.needs_grad(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    kernels::gemm(k, m, n, av.data(), true, g, false, gb, true);
                }
            }
            Op::Reduce { kind, a, map, aux } => {
                let x = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], x.len());
                let m = map.count as f64;
                match kind {
                    ReduceKind::Sum => {
                        for (v, &o) in ga.iter_mut().zip(&map.out_index) {
                            *v += g[o];
                        }
                    }
                    ReduceKind::Mean => {
                        for (v, &o) in ga.iter_mut().zip(&map.out_index) {
                            *v += g[o] / m;
                        }
                    }
                    ReduceKind::VarBiased => {
                        for ((v, &xj), &o) in ga.iter_mut().zip(x).zip(&map.out_index) {
                            *v += g[o] * 2.0 * (xj - aux[o]) / m;
                        }
                    }
                    ReduceKind::Min | ReduceKind::Max => {
                        for (o, &arg) in aux.iter().enumerate() {
                            ga[arg as usize] += g[o];
                        }
                    }
                }
            }
            Op::AxisBinary { op, a, v, axis } => {
                let (av, vv) = (self.value(*a), self.value(*v));
                let inner: usize = av.shape()[axis + 1..].iter().product::<usize>().max(1);
                let len = av.shape()[*axis];
                let (x, c) = (av.data(), vv.data());
                if self.needs_grad(*a) {
                    let ga = accumulate(&mut grads[a.0], x.len());
                    for (chunk_idx, (gchunk, gout)) in ga.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                        let cv = c[chunk_idx % len];
                        let scale = match op {
                            BinaryOp::Mul => cv,
                            BinaryOp::Div => 1.0 / cv,
                            _ => 1.0,
                        };
                        for (dst, &src) in gchunk.iter_mut().zip(gout) {
                            *dst += src * scale;
                        }
                    }
                }
                if self.needs_grad(*v) {
                    let mut acc = vec![0.0; len];
                    for (chunk_idx, (xchunk, gout)) in x.chunks(inner).zip(g.chunks(inner)).enumerate() {
                        let slot = chunk_idx % len;
                        let s: f64 = match op {
                            BinaryOp::Add => gout.iter().sum(),
                            BinaryOp::Sub => -gout.iter().sum::<f64>(),
                            BinaryOp::Mul => xchunk.iter().zip(gout).map(|(a, b)| a * b).sum(),
                            BinaryOp::Div => {
                                let cv = c[slot];
                                -xchunk.iter().zip(gout).map(|(a, b)| a * b).sum::<f64>() / (cv * cv)
                            }
                            BinaryOp::Pow => unreachable!("rejected in forward"),
                        };
                        acc[slot] += s;
                    }
                    let gv = accumulate(&mut grads[v.0], len);
                    for (dst, s) in gv.iter_mut().zip(acc) {
                        *dst += s;
                    }
                }
            }
            Op::Reshape { a } => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for (dst, &src) in ga.iter_mut().zip(g) {
                    *dst += src;
                }
            }
            Op::Conv2d { x, w, geom, filters } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let n = xv.shape()[0];
                let mut gx = self.needs_grad(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; xv.len()]));
                let mut gw = self.needs_grad(*w).then(|| grads[w.0].take().unwrap_or_else(|| vec![0.0; wv.len()]));
                kernels::conv2d_backward(
                    xv.data(),
                    n,
                    wv.data(),
                    *filters,
                    geom,
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if gx.is_some() {
                    grads[x.0] = gx;
                }
                if gw.is_some() {
                    grads[w.0] = gw;
                }
            }
            Op::MaxPool { x, argmax } => {
                let ga = accumulate(&mut grads[x.0], self.value(*x).len());
                for (&src, &idx) in g.iter().zip(argmax) {
                    ga[idx] += src;
                }
            }
            Op::AvgPool { x, geom } => {
                let xv = self.value(*x);
                let n = xv.shape()[0];
                let ga = accumulate(&mut grads[x.0], xv.len());
                kernels::avg_pool_backward(g, n, geom, ga);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let ga = accumulate(&mut grads[logits.0], probs.len());
                let scale = g[0] / n as f64;
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        ga[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
            Op::ChannelNorm { x, saved } => {
                let xv = self.value(*x);
                let ga = accumulate(&mut grads[x.0], xv.len());
                kernels::channel_norm_backward(xv.shape(), out, g, saved, ga);
            }
            Op::Margin { logits, labels, runner_up } => {
                let k = self.value(*logits).shape()[1];
                let ga = accumulate(&mut grads[logits.0], labels.len() * k);
                for (r, (&y, &o)) in labels.iter().zip(runner_up).enumerate() {
                    ga[r * k + y] += g[r];
                    ga[r * k + o] -= g[r];
                }
            }
        }
        Ok(())
    }
}
