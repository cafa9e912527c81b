//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, so the node list is already topologically sorted; [`Graph::backward`]
//! walks it once in reverse.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Exp,
    Ln,
    Abs,
    LeakyRelu(f64),
    Tanh,
    Square,
    Sqrt,
    Clamp(f64, f64),
    Recip,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(usize, Unary),
    Sum(usize),
    Mean(usize),
    SumAxis(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    Transpose(usize),
    Bmm(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Resize(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording of a computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the leaf `var`, if it influenced
    /// the loss. Gradients of intermediate values are not retained.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient [`Graph::backward`] will report.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                let mut emit = |pid: usize, pg: Tensor| {
                    if !nodes[pid].needs_grad {
                        return;
                    }
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                };
                backprop(&nodes, node, &g, &mut emit);
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let wants = |id: usize| nodes[id].needs_grad;
    let out = &*node.value;
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            emit(a, kernels::sum_to_shape(g, val(a).shape()));
            emit(b, kernels::sum_to_shape(g, val(b).shape()));
        }
        Op::Sub(a, b) => {
            emit(a, kernels::sum_to_shape(g, val(a).shape()));
            if wants(b) {
                emit(b, kernels::sum_to_shape(&g.map(|v| -v), val(b).shape()));
            }
        }
        Op::Mul(a, b) => {
            if wants(a) {
                let ga = kernels::broadcast_zip(g, val(b), |x, y| x * y);
                emit(a, kernels::sum_to_shape(&ga, val(a).shape()));
            }
            if wants(b) {
                let gb = kernels::broadcast_zip(g, val(a), |x, y| x * y);
                emit(b, kernels::sum_to_shape(&gb, val(b).shape()));
            }
        }
        Op::Div(a, b) => {
            if wants(a) {
                let ga = kernels::broadcast_zip(g, val(b), |x, y| x / y);
                emit(a, kernels::sum_to_shape(&ga, val(a).shape()));
            }
            if wants(b) {
                let t = g.zip_map(out, |x, y| -x * y);
                let gb = kernels::broadcast_zip(&t, val(b), |x, y| x / y);
                emit(b, kernels::sum_to_shape(&gb, val(b).shape()));
            }
        }
        Op::Scale(a, s) => emit(a, g.map(|v| v * s)),
        Op::AddScalar(a) => emit(a, g.clone()),
        Op::Unary(a, kind) => {
            let x = val(a);
            let ga = match kind {
                Unary::Sigmoid => g.zip_map(out, |g, y| g * y * (1.0 - y)),
                Unary::Exp => g.zip_map(out, |g, y| g * y),
                Unary::Ln => g.zip_map(x, |g, x| g / x),
                Unary::Abs => g.zip_map(x, |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }),
                Unary::LeakyRelu(alpha) => g.zip_map(x, |g, x| if x > 0.0 { g } else { alpha * g }),
                Unary::Tanh => g.zip_map(out, |g, y| g * (1.0 - y * y)),
                Unary::Square => g.zip_map(x, |g, x| 2.0 * g * x),
                Unary::Sqrt => g.zip_map(out, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }),
                Unary::Clamp(lo, hi) => g.zip_map(x, |g, x| if (lo..=hi).contains(&x) { g } else { 0.0 }),
                Unary::Recip => g.zip_map(out, |g, y| -g * y * y),
            };
            emit(a, ga);
        }
        Op::Sum(a) => emit(a, Tensor::full(val(a).shape().to_vec(), g.item())),
        Op::Mean(a) => {
            let n = val(a).numel() as f64;
            emit(a, Tensor::full(val(a).shape().to_vec(), g.item() / n));
        }
        Op::SumAxis(a) => {
            let zeros = Tensor::zeros(val(a).shape().to_vec());
            emit(a, kernels::broadcast_zip(&zeros, g, |_, v| v));
        }
        Op::Softmax(a, axis) => {
            let gy = g.zip_map(out, |g, y| g * y);
            let s = kernels::sum_axis(&gy, axis);
            let centered = kernels::broadcast_zip(g, &s, |g, s| g - s);
            emit(a, centered.zip_map(out, |c, y| c * y));
        }
        Op::LogSoftmax(a, axis) => {
            let s = kernels::sum_axis(g, axis);
            let p = out.map(f64::exp);
            let ps = kernels::broadcast_zip(&p, &s, |p, s| p * s);
            emit(a, g.zip_map(&ps, |g, v| g - v));
        }
        Op::Reshape(a) => emit(a, g.clone().reshape(val(a).shape().to_vec())),
        Op::Concat(ref parts, axis) => {
            let mut start = 0;
            for &p in parts {
                let len = val(p).shape()[axis];
                if wants(p) {
                    emit(p, g.narrow(axis, start, len));
                }
                start += len;
            }
        }
        Op::Narrow(a, axis, start) => {
            let shape = val(a).shape().to_vec();
            let (outer, dim, inner) = kernels::axis_split(&shape, axis);
            let len = g.shape()[axis];
            let mut full = vec![0.0; val(a).numel()];
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                full[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            emit(a, Tensor::new(shape, full));
        }
        Op::Transpose(a) => emit(a, kernels::transpose_last2(g)),
        Op::Bmm(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = bv.shape()[2];
            if wants(a) {
                let mut ga = vec![0.0; bs * m * k];
                for s in 0..bs {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g.data()[s * m * n..(s + 1) * m * n],
                        n,
                        1,
                        &bv.data()[s * k * n..(s + 1) * k * n],
                        1,
                        n,
                        0.0,
                        &mut ga[s * m * k..(s + 1) * m * k],
                    );
                }
                emit(a, Tensor::new([bs, m, k], ga));
            }
            if wants(b) {
                let mut gb = vec![0.0; bs * k * n];
                for s in 0..bs {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &av.data()[s * m * k..(s + 1) * m * k],
                        1,
                        k,
                        &g.data()[s * m * n..(s + 1) * m * n],
                        n,
                        1,
                        0.0,
                        &mut gb[s * k * n..(s + 1) * k * n],
                    );
                }
                emit(b, Tensor::new([bs, k, n], gb));
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => conv_backward(val(x), val(w), g, stride, pad, wants(x), wants(w), b.map(|b| (b, wants(b))), emit, x, w),
        Op::Resize(a) => {
            let (n, c, h, w) = val(a).dims4();
            let (_, _, oh, ow) = g.dims4();
            let rows = crate::tensor::nearest_index(h, oh);
            let cols = crate::tensor::nearest_index(w, ow);
            let mut acc = vec![0.0; n * c * h * w];
            for (plane, gp) in acc.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                for (oy, &sy) in rows.iter().enumerate() {
                    for (ox, &sx) in cols.iter().enumerate() {
                        plane[sy * w + sx] += gp[oy * ow + ox];
                    }
                }
            }
            emit(a, Tensor::new([n, c, h, w], acc));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
    bias: Option<(usize, bool)>,
    emit: &mut dyn FnMut(usize, Tensor),
    xid: usize,
    wid: usize,
) {
    let (n, c, h, wd) = x.dims4();
    let (co, _, kh, kw) = w.dims4();
    let geom = ConvGeom {
        channels: c,
        height: h,
        width: wd,
        kh,
        kw,
        stride,
        pad,
    };
    let (rows, ncols) = (geom.col_rows(), geom.col_cols());
    let pointwise = geom.is_pointwise();
    let mut gw = vec![0.0; co * rows];
    let mut gx = if want_x { vec![0.0; x.numel()] } else { Vec::new() };
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * ncols] };
    let mut dcols = if pointwise || !want_x { Vec::new() } else { vec![0.0; rows * ncols] };
    for s in 0..n {
        let gs = &g.data()[s * co * ncols..(s + 1) * co * ncols];
        let xs = &x.data()[s * c * h * wd..(s + 1) * c * h * wd];
        if want_w {
            let src: &[f64] = if pointwise {
                xs
            } else {
                kernels::im2col(xs, &geom, &mut cols);
                &cols
            };
            // gW += gY · colsᵀ
            kernels::gemm(co, ncols, rows, gs, ncols, 1, src, 1, ncols, 1.0, &mut gw);
        }
        if want_x {
            let gxs = &mut gx[s * c * h * wd..(s + 1) * c * h * wd];
            if pointwise {
                kernels::gemm(rows, co, ncols, w.data(), 1, rows, gs, ncols, 1, 0.0, gxs);
            } else {
                kernels::gemm(rows, co, ncols, w.data(), 1, rows, gs, ncols, 1, 0.0, &mut dcols);
                kernels::col2im(&dcols, &geom, gxs);
            }
        }
    }
    if want_w {
        emit(wid, Tensor::new(w.shape().to_vec(), gw));
    }
    if want_x {
        emit(xid, Tensor::new(x.shape().to_vec(), gx));
    }
    if let Some((bid, true)) = bias {
        let mut gb = vec![0.0; co];
        for s in 0..n {
            for (o, acc) in gb.iter_mut().enumerate() {
                let start = (s * co + o) * ncols;
                *acc += g.data()[start..start + ncols].iter().sum::<f64>();
            }
        }
        emit(bid, Tensor::new([co], gb));
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&self) -> Var<'g> {
        self.graph.input((*self.value()).clone())
    }

    fn unary_op(self, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.requires_grad();
        self.graph.push(value, op, needs)
    }

    fn binary(self, other: Var<'g>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'g> {
        let value = kernels::broadcast_zip(&self.value(), &other.value(), f);
        let needs = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, needs)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let v = self.value().map(|x| x * s);
        self.unary_op(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let v = self.value().map(|x| x + s);
        self.unary_op(v, Op::AddScalar(self.id))
    }

    /// `s - self`, elementwise.
    pub fn rsub_scalar(self, s: f64) -> Var<'g> {
        self.scale(-1.0).add_scalar(s)
    }

    fn apply(self, kind: Unary, f: impl Fn(f64) -> f64) -> Var<'g> {
        let v = self.value().map(f);
        self.unary_op(v, Op::Unary(self.id, kind))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.apply(Unary::Sigmoid, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(self) -> Var<'g> {
        self.apply(Unary::Exp, f64::exp)
    }

    pub fn ln(self) -> Var<'g> {
        self.apply(Unary::Ln, f64::ln)
    }

    pub fn abs(self) -> Var<'g> {
        self.apply(Unary::Abs, f64::abs)
    }

    pub fn leaky_relu(self, alpha: f64) -> Var<'g> {
        self.apply(Unary::LeakyRelu(alpha), move |x| if x > 0.0 { x } else { alpha * x })
    }

    pub fn relu(self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn tanh(self) -> Var<'g> {
        self.apply(Unary::Tanh, f64::tanh)
    }

    pub fn square(self) -> Var<'g> {
        self.apply(Unary::Square, |x| x * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.apply(Unary::Sqrt, f64::sqrt)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.apply(Unary::Clamp(lo, hi), move |x| x.clamp(lo, hi))
    }

    pub fn recip(self) -> Var<'g> {
        self.apply(Unary::Recip, |x| 1.0 / x)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary_op(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().mean());
        self.unary_op(v, Op::Mean(self.id))
    }

    /// Sum along `axis`, which is kept with length 1.
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let v = kernels::sum_axis(&self.value(), axis);
        self.unary_op(v, Op::SumAxis(self.id))
    }

    pub fn softmax(self, axis: usize) -> Var<'g> {
        let v = kernels::softmax(&self.value(), axis);
        self.unary_op(v, Op::Softmax(self.id, axis))
    }

    pub fn log_softmax(self, axis: usize) -> Var<'g> {
        let v = kernels::log_softmax(&self.value(), axis);
        self.unary_op(v, Op::LogSoftmax(self.id, axis))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let v = (*self.value()).clone().reshape(shape);
        self.unary_op(v, Op::Reshape(self.id))
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| &**v).collect();
        let v = Tensor::concat(&refs, axis);
        let needs = parts.iter().any(|p| p.requires_grad());
        graph.push(v, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), needs)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let v = self.value().narrow(axis, start, len);
        self.unary_op(v, Op::Narrow(self.id, axis, start))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Var<'g> {
        let v = kernels::transpose_last2(&self.value());
        self.unary_op(v, Op::Transpose(self.id))
    }

    /// Batched matrix product `[B,M,K]·[B,K,N]`.
    pub fn bmm(self, other: Var<'g>) -> Var<'g> {
        let v = kernels::bmm(&self.value(), &other.value());
        let needs = self.requires_grad() || other.requires_grad();
        self.graph.push(v, Op::Bmm(self.id, other.id), needs)
    }

    /// 2-D convolution of an `N×C×H×W` input with `Cout×C×kh×kw` weights.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let bias_value = bias.map(|b| b.value());
        let v = kernels::conv2d(&self.value(), &weight.value(), bias_value.as_deref(), stride, pad);
        let needs = self.requires_grad()
            || weight.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        self.graph.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                stride,
                pad,
            },
            needs,
        )
    }

    /// Nearest-neighbour resize of the spatial axes.
    pub fn resize_nearest(self, h: usize, w: usize) -> Var<'g> {
        let shape = self.shape();
        if shape[2] == h && shape[3] == w {
            return self;
        }
        let v = self.value().resize_nearest(h, w);
        self.unary_op(v, Op::Resize(self.id))
    }
}

impl<'g> ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        Var::add(self, rhs)
    }
}

impl<'g> ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        Var::sub(self, rhs)
    }
}

impl<'g> ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        Var::mul(self, rhs)
    }
}

impl<'g> ops::Div for Var<'g> {
    type Output = Var<'g>;
    fn div(self, rhs: Var<'g>) -> Var<'g> {
        Var::div(self, rhs)
    }
}

impl<'g> ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}
