//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended in creation order, so the node list is already a
//! topological order and the graph cannot contain cycles.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Abs,
    Square,
    Sigmoid,
    Tanh,
    Softplus,
    Silu,
    Sin,
    Cos,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div)
    }

    pub fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Div => "div",
            Elementwise::Neg => "neg",
            Elementwise::Exp => "exp",
            Elementwise::Log => "log",
            Elementwise::Sqrt => "sqrt",
            Elementwise::Abs => "abs",
            Elementwise::Square => "square",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Tanh => "tanh",
            Elementwise::Softplus => "softplus",
            Elementwise::Silu => "silu",
            Elementwise::Sin => "sin",
            Elementwise::Cos => "cos",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary { kind: Elementwise, a: usize, b: usize },
    Unary { kind: Elementwise, a: usize },
    Scale { a: usize, factor: f64 },
    Shift { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    Reduce { kind: Reduce, a: usize, axis: Option<usize> },
    Matmul { a: usize, b: usize },
    Conv2d { input: usize, kernel: usize, stride: usize },
    ChannelBias { x: usize, bias: usize },
    BilinearSample { input: usize, grid: usize },
    AffineGrid { theta: usize },
    AvgPool2 { a: usize },
    Upsample2 { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    ExpandLast { a: usize },
    SoftmaxLast { a: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } | Op::Unary { kind, .. } => kind.name(),
            Op::Scale { .. } => "scale",
            Op::Shift { .. } => "shift",
            Op::Clamp { .. } => "clamp",
            Op::Reduce { kind: Reduce::Sum, .. } => "sum",
            Op::Reduce { kind: Reduce::Mean, .. } => "mean",
            Op::Matmul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::AffineGrid { .. } => "affine_grid",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::Upsample2 { .. } => "upsample2",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::ExpandLast { .. } => "expand_last",
            Op::SoftmaxLast { .. } => "softmax",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::Matmul { a, b } => vec![*a, *b],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ChannelBias { x, bias } => vec![*x, *bias],
            Op::BilinearSample { input, grid } => vec![*input, *grid],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Unary { a, .. }
            | Op::Scale { a, .. }
            | Op::Shift { a }
            | Op::Clamp { a, .. }
            | Op::Reduce { a, .. }
            | Op::AvgPool2 { a }
            | Op::Upsample2 { a }
            | Op::Slice { a, .. }
            | Op::Reshape { a }
            | Op::ExpandLast { a }
            | Op::SoftmaxLast { a } => vec![*a],
            Op::AffineGrid { theta } => vec![*theta],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

thread_local! {
    static FAULT: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Corrupt the backward rule of the named op on this thread (scales its
/// input gradients by 1.5). Used by verification fixtures to prove that the
/// gradient checks detect broken rules. `None` clears the fault.
pub fn inject_backward_fault(op_name: Option<&str>) {
    FAULT.with(|f| *f.borrow_mut() = op_name.map(str::to_owned));
}

fn fault_factor(op: &Op) -> f64 {
    FAULT.with(|f| match f.borrow().as_deref() {
        Some(name) if name == op.name() => 1.5,
        _ => 1.0,
    })
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

/// A computation graph recording differentiable operations.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn binary_shape(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(format!(
            "elementwise shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn unary_value(kind: Elementwise, x: f64) -> f64 {
    match kind {
        Elementwise::Neg => -x,
        Elementwise::Exp => x.exp(),
        Elementwise::Log => x.ln(),
        Elementwise::Sqrt => x.sqrt(),
        Elementwise::Abs => x.abs(),
        Elementwise::Square => x * x,
        Elementwise::Sigmoid => sigmoid(x),
        Elementwise::Tanh => x.tanh(),
        Elementwise::Softplus => softplus(x),
        Elementwise::Silu => x * sigmoid(x),
        Elementwise::Sin => x.sin(),
        Elementwise::Cos => x.cos(),
        _ => unreachable!("binary kind in unary position"),
    }
}

/// Derivative of a unary op given input `x` and output `y`.
fn unary_derivative(kind: Elementwise, x: f64, y: f64) -> f64 {
    match kind {
        Elementwise::Neg => -1.0,
        Elementwise::Exp => y,
        Elementwise::Log => 1.0 / x,
        Elementwise::Sqrt => 0.5 / y,
        Elementwise::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Elementwise::Square => 2.0 * x,
        Elementwise::Sigmoid => y * (1.0 - y),
        Elementwise::Tanh => 1.0 - y * y,
        Elementwise::Softplus => sigmoid(x),
        Elementwise::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Elementwise::Sin => x.cos(),
        Elementwise::Cos => -x.sin(),
        _ => unreachable!("binary kind in unary position"),
    }
}

/// `(outer, dim, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn check_chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("{what} must be [C,H,W], got {:?}", t.shape()))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), backward_done: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op: Op::Leaf, requires_grad });
        Var(nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Same value as `v` with the gradient path cut.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    // ---- elementwise ----------------------------------------------------

    /// Apply a pointwise op. Binary kinds need `b` and equal shapes or a one-element side.
    pub fn elementwise(&self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let av = self.value(a);
        if kind.is_binary() {
            let b = b.ok_or_else(|| Error::shape(format!("{} needs two operands", kind.name())))?;
            let bv = self.value(b);
            let shape = binary_shape(&av, &bv)?;
            if kind == Elementwise::Div && bv.data().iter().any(|&x| x == 0.0) {
                return Err(Error::Domain("division by zero".into()));
            }
            let n: usize = shape.iter().product();
            let (ad, bd) = (av.data(), bv.data());
            let ai = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
            let bi = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
            let data: Vec<f64> = (0..n)
                .map(|i| match kind {
                    Elementwise::Add => ai(i) + bi(i),
                    Elementwise::Sub => ai(i) - bi(i),
                    Elementwise::Mul => ai(i) * bi(i),
                    Elementwise::Div => ai(i) / bi(i),
                    _ => unreachable!(),
                })
                .collect();
            Ok(self.push(Tensor::from_parts(shape, data), Op::Binary { kind, a: a.0, b: b.0 }))
        } else {
            if b.is_some() {
                return Err(Error::shape(format!("{} takes one operand", kind.name())));
            }
            if kind == Elementwise::Log && av.data().iter().any(|&x| x <= 0.0) {
                return Err(Error::Domain("log of non-positive value".into()));
            }
            if kind == Elementwise::Sqrt && av.data().iter().any(|&x| x <= 0.0) {
                return Err(Error::Domain("sqrt of non-positive value".into()));
            }
            let out = av.map(|x| unary_value(kind, x));
            Ok(self.push(out, Op::Unary { kind, a: a.0 }))
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Div, a, Some(b))
    }

    fn unary(&self, kind: Elementwise, a: Var) -> Var {
        let out = self.value(a).map(|x| unary_value(kind, x));
        self.push(out, Op::Unary { kind, a: a.0 })
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(Elementwise::Neg, a)
    }
    pub fn exp(&self, a: Var) -> Var {
        self.unary(Elementwise::Exp, a)
    }
    pub fn log(&self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Log, a, None)
    }
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sqrt, a, None)
    }
    pub fn abs(&self, a: Var) -> Var {
        self.unary(Elementwise::Abs, a)
    }
    pub fn square(&self, a: Var) -> Var {
        self.unary(Elementwise::Square, a)
    }
    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(Elementwise::Sigmoid, a)
    }
    pub fn tanh(&self, a: Var) -> Var {
        self.unary(Elementwise::Tanh, a)
    }
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(Elementwise::Softplus, a)
    }
    pub fn silu(&self, a: Var) -> Var {
        self.unary(Elementwise::Silu, a)
    }
    pub fn sin(&self, a: Var) -> Var {
        self.unary(Elementwise::Sin, a)
    }
    pub fn cos(&self, a: Var) -> Var {
        self.unary(Elementwise::Cos, a)
    }

    /// `factor · a`.
    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale { a: a.0, factor })
    }

    /// `a + offset`.
    pub fn shift(&self, a: Var, offset: f64) -> Var {
        let out = self.value(a).map(|x| x + offset);
        self.push(out, Op::Shift { a: a.0 })
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the bound is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp { a: a.0, lo, hi })
    }

    pub fn clamp_min(&self, a: Var, lo: f64) -> Var {
        self.clamp(a, lo, f64::INFINITY)
    }

    // ---- reductions and linear algebra ----------------------------------

    /// Sum or mean, over one axis or (with `None`) the whole tensor.
    pub fn reduce(&self, kind: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        let av = self.value(a);
        let out = match axis {
            None => {
                let s = av.sum();
                Tensor::scalar(if kind == Reduce::Mean { s / av.len() as f64 } else { s })
            }
            Some(ax) => {
                if ax >= av.rank() {
                    return Err(Error::shape(format!("axis {ax} invalid for shape {:?}", av.shape())));
                }
                let (outer, dim, inner) = split_axis(av.shape(), ax);
                let mut data = vec![0.0; outer * inner];
                let d = av.data();
                for o in 0..outer {
                    for k in 0..dim {
                        let row = &d[(o * dim + k) * inner..][..inner];
                        for (acc, x) in data[o * inner..][..inner].iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                }
                if kind == Reduce::Mean {
                    data.iter_mut().for_each(|x| *x /= dim as f64);
                }
                Tensor::from_parts(removed_axis(av.shape(), ax), data)
            }
        };
        Ok(self.push(out, Op::Reduce { kind, a: a.0, axis }))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.reduce(Reduce::Sum, a, None).expect("full reduction cannot fail")
    }

    pub fn mean(&self, a: Var) -> Var {
        self.reduce(Reduce::Mean, a, None).expect("full reduction cannot fail")
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::shape(format!("matmul {sa:?} · {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), bv.data(), &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul { a: a.0, b: b.0 }))
    }

    // ---- image ops ------------------------------------------------------

    /// Same-size convolution: odd kernel, zero padding `(k-1)/2`, stride 1.
    pub fn conv2d(&self, input: Var, kernels: Var) -> Result<Var> {
        self.conv2d_strided(input, kernels, 1)
    }

    /// Zero-padded convolution with stride; output size `ceil(H/stride)`.
    pub fn conv2d_strided(&self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (xv, kv) = (self.value(input), self.value(kernel));
        let (c_in, h, w) = check_chw(&xv, "conv2d input")?;
        let (c_out, kc, k) = match *kv.shape() {
            [co, ci, kh, kw] if kh == kw => (co, ci, kh),
            _ => return Err(Error::shape(format!("conv2d kernel must be [Co,Ci,k,k], got {:?}", kv.shape()))),
        };
        if k % 2 == 0 {
            return Err(Error::config("conv2d.kernel", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::config("conv2d.stride", "stride must be positive"));
        }
        if kc != c_in {
            return Err(Error::shape(format!("conv2d kernel expects {kc} input channels, got {c_in}")));
        }
        let geom = ConvGeom { c_in, h, w, k, stride };
        let out = kernels::conv2d_forward(xv.data(), kv.data(), c_out, geom);
        let t = Tensor::from_parts(vec![c_out, geom.h_out(), geom.w_out()], out);
        Ok(self.push(t, Op::Conv2d { input: input.0, kernel: kernel.0, stride }))
    }

    /// Add a per-channel bias `[C]` to `[C,H,W]`.
    pub fn channel_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (c, h, w) = check_chw(&xv, "channel_bias input")?;
        if bv.shape() != [c] {
            return Err(Error::shape(format!("bias {:?} for {c} channels", bv.shape())));
        }
        let mut data = xv.data().to_vec();
        for ch in 0..c {
            let b = bv.data()[ch];
            data[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(Tensor::from_parts(vec![c, h, w], data), Op::ChannelBias { x: x.0, bias: bias.0 }))
    }

    /// Bilinear sampling of `input [C,H,W]` at normalized `(x, y)` grid points.
    ///
    /// `grid` is `[Ho,Wo,2]` (shared by every channel) or `[C,Ho,Wo,2]`.
    /// Pixel coordinates follow `x_pix = (x+1)/2·(W−1)`, so the corners ±1 land
    /// on the outer pixel centers. Samples outside the image read as zero.
    pub fn bilinear_sample(&self, input: Var, grid: Var) -> Result<Var> {
        let (xv, gv) = (self.value(input), self.value(grid));
        let (c, h, w) = check_chw(&xv, "bilinear_sample input")?;
        let (ho, wo, per_channel) = match *gv.shape() {
            [ho, wo, 2] => (ho, wo, false),
            [gc, ho, wo, 2] if gc == c => (ho, wo, true),
            _ => {
                return Err(Error::shape(format!(
                    "grid must be [Ho,Wo,2] or [{c},Ho,Wo,2], got {:?}",
                    gv.shape()
                )))
            }
        };
        let out = kernels::bilinear_forward(xv.data(), gv.data(), c, h, w, ho, wo, per_channel);
        Ok(self.push(Tensor::from_parts(vec![c, ho, wo], out), Op::BilinearSample { input: input.0, grid: grid.0 }))
    }

    /// Per-channel sampling grids `[C,H,W,2]` from affine rows `theta [C,6]`
    /// laid out as `(a, b, tx, c, d, ty)`: `x̂ = a·x + b·y + tx`, `ŷ = c·x + d·y + ty`.
    pub fn affine_grid(&self, theta: Var, height: usize, width: usize) -> Result<Var> {
        let tv = self.value(theta);
        let c = match *tv.shape() {
            [c, 6] => c,
            _ => return Err(Error::shape(format!("theta must be [C,6], got {:?}", tv.shape()))),
        };
        let out = kernels::affine_grid_forward(tv.data(), c, height, width);
        Ok(self.push(Tensor::from_parts(vec![c, height, width, 2], out), Op::AffineGrid { theta: theta.0 }))
    }

    /// 2×2 average pooling; H and W must be even.
    pub fn avg_pool2(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (c, h, w) = check_chw(&av, "avg_pool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("avg_pool2 needs even sizes, got {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let d = av.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ch * h * w;
                    out[(ch * ho + i) * wo + j] = 0.25
                        * (d[base + 2 * i * w + 2 * j]
                            + d[base + 2 * i * w + 2 * j + 1]
                            + d[base + (2 * i + 1) * w + 2 * j]
                            + d[base + (2 * i + 1) * w + 2 * j + 1]);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, ho, wo], out), Op::AvgPool2 { a: a.0 }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (c, h, w) = check_chw(&av, "upsample2 input")?;
        let (ho, wo) = (2 * h, 2 * w);
        let d = av.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[(ch * ho + i) * wo + j] = d[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, ho, wo], out), Op::Upsample2 { a: a.0 }))
    }

    // ---- structural ops -------------------------------------------------

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape(format!("concat shape mismatch {s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let dim = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let _ = first;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis },
        ))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() || len == 0 || start + len > av.shape()[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} on axis {axis} of {:?}",
                start + len,
                av.shape()
            )));
        }
        let (outer, dim, inner) = split_axis(av.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&av.data()[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { a: a.0, axis, start }))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a: a.0 }))
    }

    /// `[..] → [.., n]` by repeating every element `n` times.
    pub fn expand_last(&self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::shape("expand_last by zero"));
        }
        let av = self.value(a);
        let data: Vec<f64> = av.data().iter().flat_map(|&x| std::iter::repeat(x).take(n)).collect();
        let mut shape = av.shape().to_vec();
        shape.push(n);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ExpandLast { a: a.0 }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = *av.shape().last().expect("tensors have rank ≥ 1");
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        self.push(Tensor::from_parts(av.shape().to_vec(), data), Op::SoftmaxLast { a: a.0 })
    }

    // ---- backward -------------------------------------------------------

    /// Clear the backward-ran flag so that `backward` may be called again.
    pub fn reset(&self) {
        self.backward_done.set(false);
    }

    /// Reverse-mode gradients of the one-element `loss` with respect to every
    /// node that requires them. A second call without [`Graph::reset`] fails.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.backward_done.get() {
            return Err(Error::Graph("backward already ran on this graph; call reset() first".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        self.backward_done.set(true);
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(nodes[loss.0].value.shape().to_vec(), vec![1.0]));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let factor = fault_factor(&node.op);
            let contributions = backward_rule(&nodes, node, &g)?;
            // Put our own gradient back so callers can inspect intermediate nodes.
            grads[id] = Some(g);
            for (parent, mut dg) in contributions {
                if !nodes[parent].requires_grad {
                    continue;
                }
                if factor != 1.0 {
                    dg.data_mut().iter_mut().for_each(|x| *x *= factor);
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(dg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Sum a full-shape gradient down to one element when the operand was broadcast.
fn unbroadcast(g: &Tensor, operand: &Tensor) -> Tensor {
    if operand.len() == 1 && g.len() != 1 {
        Tensor::from_parts(operand.shape().to_vec(), vec![g.sum()])
    } else {
        g.clone()
    }
}

fn backward_rule(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let need = |i: usize| nodes[i].requires_grad;
    let out = &node.value;
    let gd = g.data();
    let shaped = |like: &Tensor, data: Vec<f64>| Tensor::from_parts(like.shape().to_vec(), data);

    let result = match &node.op {
        Op::Leaf => vec![],
        Op::Binary { kind, a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let ai = |i: usize| if av.len() == 1 { av.data()[0] } else { av.data()[i] };
            let bi = |i: usize| if bv.len() == 1 { bv.data()[0] } else { bv.data()[i] };
            let n = gd.len();
            let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                Elementwise::Add => (gd.to_vec(), gd.to_vec()),
                Elementwise::Sub => (gd.to_vec(), gd.iter().map(|x| -x).collect()),
                Elementwise::Mul => ((0..n).map(|i| gd[i] * bi(i)).collect(), (0..n).map(|i| gd[i] * ai(i)).collect()),
                Elementwise::Div => (
                    (0..n).map(|i| gd[i] / bi(i)).collect(),
                    (0..n).map(|i| -gd[i] * ai(i) / (bi(i) * bi(i))).collect(),
                ),
                _ => unreachable!(),
            };
            let mut v = Vec::new();
            if need(*a) {
                v.push((*a, unbroadcast(&shaped(out, da), av)));
            }
            if need(*b) {
                v.push((*b, unbroadcast(&shaped(out, db), bv)));
            }
            v
        }
        Op::Unary { kind, a } => {
            let av = val(*a);
            let data = av
                .data()
                .iter()
                .zip(out.data())
                .zip(gd)
                .map(|((&x, &y), &g)| g * unary_derivative(*kind, x, y))
                .collect();
            vec![(*a, shaped(av, data))]
        }
        Op::Scale { a, factor } => vec![(*a, g.map(|x| x * factor))],
        Op::Shift { a } => vec![(*a, g.clone())],
        Op::Clamp { a, lo, hi } => {
            let av = val(*a);
            let data = av
                .data()
                .iter()
                .zip(gd)
                .map(|(&x, &g)| if x < *lo || x > *hi { 0.0 } else { g })
                .collect();
            vec![(*a, shaped(av, data))]
        }
        Op::Reduce { kind, a, axis } => {
            let av = val(*a);
            let data = match axis {
                None => {
                    let s = if *kind == Reduce::Mean { gd[0] / av.len() as f64 } else { gd[0] };
                    vec![s; av.len()]
                }
                Some(ax) => {
                    let (outer, dim, inner) = split_axis(av.shape(), *ax);
                    let scale = if *kind == Reduce::Mean { 1.0 / dim as f64 } else { 1.0 };
                    let mut d = vec![0.0; av.len()];
                    for o in 0..outer {
                        for k in 0..dim {
                            for i in 0..inner {
                                d[(o * dim + k) * inner + i] = gd[o * inner + i] * scale;
                            }
                        }
                    }
                    d
                }
            };
            vec![(*a, shaped(av, data))]
        }
        Op::Matmul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let mut v = Vec::new();
            if need(*a) {
                let mut da = vec![0.0; m * k];
                kernels::gemm_nt(m, n, k, gd, bv.data(), &mut da, false);
                v.push((*a, shaped(av, da)));
            }
            if need(*b) {
                let mut db = vec![0.0; k * n];
                kernels::gemm_tn(k, m, n, av.data(), gd, &mut db, false);
                v.push((*b, shaped(bv, db)));
            }
            v
        }
        Op::Conv2d { input, kernel, stride } => {
            let (xv, kv) = (val(*input), val(*kernel));
            let [c_in, h, w] = *xv.shape() else { unreachable!() };
            let c_out = kv.shape()[0];
            let geom = ConvGeom { c_in, h, w, k: kv.shape()[2], stride: *stride };
            let (dx, dk) = kernels::conv2d_backward(xv.data(), kv.data(), gd, c_out, geom, need(*input), need(*kernel));
            let mut v = Vec::new();
            if let Some(dx) = dx {
                v.push((*input, shaped(xv, dx)));
            }
            if let Some(dk) = dk {
                v.push((*kernel, shaped(kv, dk)));
            }
            v
        }
        Op::ChannelBias { x, bias } => {
            let bv = val(*bias);
            let c = bv.len();
            let plane = gd.len() / c;
            let db = (0..c).map(|ch| gd[ch * plane..(ch + 1) * plane].iter().sum()).collect();
            vec![(*x, g.clone()), (*bias, shaped(bv, db))]
        }
        Op::BilinearSample { input, grid } => {
            let (xv, gv) = (val(*input), val(*grid));
            let [c, h, w] = *xv.shape() else { unreachable!() };
            let (ho, wo) = (out.shape()[1], out.shape()[2]);
            let per_channel = gv.rank() == 4;
            let (dx, dgrid) = kernels::bilinear_backward(xv.data(), gv.data(), gd, c, h, w, ho, wo, per_channel);
            vec![(*input, shaped(xv, dx)), (*grid, shaped(gv, dgrid))]
        }
        Op::AffineGrid { theta } => {
            let tv = val(*theta);
            let [c, h, w, _] = *out.shape() else { unreachable!() };
            vec![(*theta, shaped(tv, kernels::affine_grid_backward(gd, c, h, w)))]
        }
        Op::AvgPool2 { a } => {
            let av = val(*a);
            let [c, h, w] = *av.shape() else { unreachable!() };
            let (ho, wo) = (h / 2, w / 2);
            let mut d = vec![0.0; av.len()];
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        d[(ch * h + i) * w + j] = 0.25 * gd[(ch * ho + i / 2) * wo + j / 2];
                    }
                }
            }
            vec![(*a, shaped(av, d))]
        }
        Op::Upsample2 { a } => {
            let av = val(*a);
            let [c, h, w] = *av.shape() else { unreachable!() };
            let (ho, wo) = (2 * h, 2 * w);
            let mut d = vec![0.0; av.len()];
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        d[(ch * h + i / 2) * w + j / 2] += gd[(ch * ho + i) * wo + j];
                    }
                }
            }
            vec![(*a, shaped(av, d))]
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            let mut v = Vec::new();
            for &p in parts {
                let pv = val(p);
                let dim = pv.shape()[*axis];
                if need(p) {
                    let mut d = Vec::with_capacity(pv.len());
                    for o in 0..outer {
                        d.extend_from_slice(&gd[(o * total + offset) * inner..(o * total + offset + dim) * inner]);
                    }
                    v.push((p, shaped(pv, d)));
                }
                offset += dim;
            }
            v
        }
        Op::Slice { a, axis, start } => {
            let av = val(*a);
            let (outer, dim, inner) = split_axis(av.shape(), *axis);
            let len = out.shape()[*axis];
            let mut d = vec![0.0; av.len()];
            for o in 0..outer {
                d[(o * dim + start) * inner..(o * dim + start + len) * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*a, shaped(av, d))]
        }
        Op::Reshape { a } => vec![(*a, shaped(val(*a), gd.to_vec()))],
        Op::ExpandLast { a } => {
            let av = val(*a);
            let n = *out.shape().last().unwrap();
            let d = gd.chunks(n).map(|c| c.iter().sum()).collect();
            vec![(*a, shaped(av, d))]
        }
        Op::SoftmaxLast { a } => {
            let av = val(*a);
            let n = *out.shape().last().unwrap();
            let mut d = vec![0.0; av.len()];
            for ((drow, yrow), grow) in d.chunks_mut(n).zip(out.data().chunks(n)).zip(gd.chunks(n)) {
                let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                for ((dx, y), g) in drow.iter_mut().zip(yrow).zip(grow) {
                    *dx = y * (g - dot);
                }
            }
            vec![(*a, shaped(av, d))]
        }
    };
    Ok(result)
}
