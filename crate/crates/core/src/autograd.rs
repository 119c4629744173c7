//! Taped reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive application in creation order, which is
//! also a topological order: an op can only reference nodes that already
//! exist. Leaves may borrow their tensors (`leaf_ref`), so model parameters are
//! never copied onto the tape.

use crate::attention::{area_attention_backward, area_attention_slices, AttentionConfig, Kernel, KernelStats};
use crate::conv::{conv2d_backward, conv2d_raw, ConvGeom};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::{
    channel_affine, concat, matmul_t, narrow, sigmoid_scalar, softmax, softplus_scalar, split_axis,
    transpose, upsample_nearest2x, Tensor,
};
use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Square,
    Exp,
    Sigmoid,
    Silu,
    Softplus,
    Sum,
    Conv2d,
    Matmul,
    Transpose,
    Softmax,
    Upsample2x,
    Concat,
    Narrow,
    Reshape,
    ChannelAffine,
    AreaAttention,
}

impl OpKind {
    pub const PRIMITIVES: [OpKind; 21] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Square,
        OpKind::Exp,
        OpKind::Sigmoid,
        OpKind::Silu,
        OpKind::Softplus,
        OpKind::Sum,
        OpKind::Conv2d,
        OpKind::Matmul,
        OpKind::Transpose,
        OpKind::Softmax,
        OpKind::Upsample2x,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Reshape,
        OpKind::ChannelAffine,
        OpKind::AreaAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Square => "square",
            OpKind::Exp => "exp",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Silu => "silu",
            OpKind::Softplus => "softplus",
            OpKind::Sum => "sum",
            OpKind::Conv2d => "conv2d",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Softmax => "softmax",
            OpKind::Upsample2x => "upsample_nearest2x",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Reshape => "reshape",
            OpKind::ChannelAffine => "channel_affine",
            OpKind::AreaAttention => "area_attention",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::PRIMITIVES.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Square(usize),
    Exp(usize),
    Sigmoid(usize),
    Silu(usize),
    Softplus(usize),
    Sum(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Matmul(usize, usize),
    Transpose(usize),
    Softmax(usize, usize),
    Upsample2x(usize),
    Concat(Vec<usize>, usize),
    Narrow { x: usize, axis: usize, start: usize },
    Reshape(usize),
    ChannelAffine { x: usize, scale: usize, bias: usize },
    AreaAttention { q: usize, k: usize, v: usize, cfg: AttentionConfig, kernel: Kernel },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Square(_) => OpKind::Square,
            Op::Exp(_) => OpKind::Exp,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Silu(_) => OpKind::Silu,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Sum(_) => OpKind::Sum,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::Concat(..) => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Reshape(_) => OpKind::Reshape,
            Op::ChannelAffine { .. } => OpKind::ChannelAffine,
            Op::AreaAttention { .. } => OpKind::AreaAttention,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Transpose(a)
            | Op::Softmax(a, _)
            | Op::Upsample2x(a)
            | Op::Reshape(a)
            | Op::Narrow { x: a, .. } => vec![*a],
            Op::Conv2d { x, w, b, .. } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Concat(xs, _) => xs.clone(),
            Op::ChannelAffine { x, scale, bias } => vec![*x, *scale, *bias],
            Op::AreaAttention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// A recording of primitive applications supporting reverse-mode gradients.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<OpKind>,
    attention_kernel: Kernel,
    scope: String,
    flops: BTreeMap<String, u64>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
            attention_kernel: Kernel::Naive,
            scope: String::new(),
            flops: BTreeMap::new(),
        }
    }

    /// Selects the kernel used by [`Graph::area_attention`] in the forward pass.
    /// Gradients always use the naive formulation.
    pub fn with_attention_kernel(mut self, kernel: Kernel) -> Self {
        self.attention_kernel = kernel;
        self
    }

    /// Test hook: scales every input gradient produced by ops of `kind` by 1.5.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label under which subsequent conv/attention FLOPs are recorded.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn flops_by_scope(&self) -> &BTreeMap<String, u64> {
        &self.flops
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.values().sum()
    }

    fn record_flops(&mut self, f: u64) {
        *self.flops.entry(self.scope.clone()).or_default() += f;
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_node(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn leaf_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_node(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_node(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_node(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Cow<'a, Tensor<T>>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let stats = KernelStats::new();
        let value = self.eval(&op, &stats)?;
        match &op {
            Op::Conv2d { geom, .. } => self.record_flops(geom.flops_per_image() * geom.n as u64),
            Op::AreaAttention { .. } => self.record_flops(stats.flops()),
            _ => {}
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_node(Cow::Owned(value), op, requires_grad))
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn eval(&self, op: &Op, stats: &KernelStats) -> Result<Tensor<T>> {
        let unary = |i: usize, f: &dyn Fn(T) -> T| self.val(i).map(f);
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x + y)?,
            Op::Sub(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x - y)?,
            Op::Mul(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x * y)?,
            Op::Scale(a, s) => {
                let s = T::of(*s);
                unary(*a, &|x| x * s)
            }
            Op::AddScalar(a, s) => {
                let s = T::of(*s);
                unary(*a, &|x| x + s)
            }
            Op::Square(a) => unary(*a, &|x| x * x),
            Op::Exp(a) => unary(*a, &|x| x.exp()),
            Op::Sigmoid(a) => unary(*a, &sigmoid_scalar),
            Op::Silu(a) => unary(*a, &|x| x * sigmoid_scalar(x)),
            Op::Softplus(a) => unary(*a, &softplus_scalar),
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Conv2d { x, w, b, geom } => {
                conv2d_raw(geom, self.val(*x).data(), self.val(*w).data(), b.map(|b| self.val(b).data()))
            }
            Op::Matmul(a, b) => matmul_t(self.val(*a), false, self.val(*b), false)?,
            Op::Transpose(a) => transpose(self.val(*a))?,
            Op::Softmax(a, axis) => softmax(self.val(*a), *axis)?,
            Op::Upsample2x(a) => upsample_nearest2x(self.val(*a))?,
            Op::Concat(xs, axis) => {
                let parts: Vec<&Tensor<T>> = xs.iter().map(|&i| self.val(i)).collect();
                concat(&parts, *axis)?
            }
            Op::Narrow { .. } => unreachable!("narrow is evaluated in Graph::narrow"),
            Op::Reshape(_) => unreachable!("reshape is evaluated in Graph::reshape"),
            Op::ChannelAffine { x, scale, bias } => channel_affine(self.val(*x), self.val(*scale), self.val(*bias))?,
            Op::AreaAttention { q, k, v, cfg, kernel } => {
                let (q, k, v) = (self.val(*q), self.val(*k), self.val(*v));
                let mut out = vec![T::zero(); q.numel()];
                for_each_head(q.shape(), cfg, |_, _, gather, scatter| {
                    let (qt, kt, vt) = (gather(q.data()), gather(k.data()), gather(v.data()));
                    let mut ot = vec![T::zero(); qt.len()];
                    area_attention_slices(&qt, &kt, &vt, qt.len() / cfg.head_dim, cfg.head_dim, cfg, *kernel, &mut ot, stats)?;
                    scatter(&ot, &mut out);
                    Ok(())
                })?;
                Tensor::new(q.shape(), out)?
            }
        })
    }

    /// Recomputes every non-leaf node from its recorded inputs and checks the
    /// result is bit-identical to what was recorded.
    pub fn verify_replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let again = match &node.op {
                Op::Leaf => continue,
                Op::Narrow { x, axis, start } => narrow(self.val(*x), *axis, *start, node.value.dim(*axis))?,
                Op::Reshape(x) => self.val(*x).reshape(node.value.shape())?,
                op => self.eval(op, &KernelStats::new())?,
            };
            if !again.bit_eq(&node.value) {
                return Err(Error::Contract(format!("replay of node {i} ({}) differs", node.op.kind())));
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::AddScalar(a.0, s))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Silu(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softplus(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a.0))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding, groups)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(dim_err!("conv2d bias axis: expected [{}], got {:?}", geom.cout, self.shape(b)));
            }
        }
        self.push(Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), geom })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Matmul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a.0))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax(a.0, axis))
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Upsample2x(a.0))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.push(Op::Concat(xs.iter().map(|v| v.0).collect(), axis))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = narrow(self.value(x), axis, start, len)?;
        let requires_grad = self.nodes[x.0].requires_grad;
        Ok(self.push_node(Cow::Owned(value), Op::Narrow { x: x.0, axis, start }, requires_grad))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let requires_grad = self.nodes[x.0].requires_grad;
        Ok(self.push_node(Cow::Owned(value), Op::Reshape(x.0), requires_grad))
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        self.push(Op::ChannelAffine { x: x.0, scale: scale.0, bias: bias.0 })
    }

    /// Multi-head area attention over `N,C,H,W` feature maps. Channels are split
    /// into `cfg.num_heads` heads of `cfg.head_dim`; the `H·W` positions are the
    /// tokens, flattened row-major and cut into `cfg.num_areas` contiguous bands.
    pub fn area_attention(&mut self, q: Var, k: Var, v: Var, cfg: &AttentionConfig) -> Result<Var> {
        cfg.validate()?;
        let shape = self.shape(q).to_vec();
        if shape.len() != 4 {
            return Err(dim_err!("area_attention expects N,C,H,W, got {shape:?}"));
        }
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(dim_err!("area_attention: Q {shape:?}, K {:?}, V {:?} differ", self.shape(k), self.shape(v)));
        }
        if shape[1] != cfg.num_heads * cfg.head_dim {
            return Err(dim_err!("area_attention channel axis {} != {} heads × {}", shape[1], cfg.num_heads, cfg.head_dim));
        }
        let kernel = self.attention_kernel;
        self.push(Op::AreaAttention { q: q.0, k: k.0, v: v.0, cfg: *cfg, kernel })
    }

    /// Gradient after [`Graph::backward`]; zeros for leaves the loss does not reach.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = self.grads.get(v.0).cloned().flatten().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
        let mut t = node.value.as_ref().clone();
        t.set_grad(Some(data));
        t.grad()
    }

    /// Moves the gradient of `v` out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        let n = self.nodes[v.0].value.numel();
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(self.grads.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| vec![T::zero(); n]))
    }

    /// The leaf's value with its gradient attached in the tensor's grad slot.
    pub fn leaf_with_grad(&self, v: Var) -> Tensor<T> {
        let mut t = self.value(v).clone();
        t.set_grad(self.grad(v).map(Tensor::into_data));
        t
    }

    /// Reverse sweep from a scalar `loss`, populating gradients of every leaf
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contributions = self.backward_op(i, &g)?;
            if self.fault == Some(self.nodes[i].op.kind()) {
                for (_, c) in &mut contributions {
                    c.iter_mut().for_each(|v| *v = *v * T::of(1.5));
                }
            }
            for (input, c) in contributions {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(c),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_op(&self, i: usize, g: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let need = |j: usize| self.nodes[j].requires_grad;
        let ew = |a: usize, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            // f(x, y, g)
            self.val(a).data().iter().zip(y).zip(g).map(|((&x, &yy), &gg)| f(x, yy, gg)).collect()
        };
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect()),
                ]
            }
            Op::Scale(a, s) => {
                let s = T::of(*s);
                vec![(*a, g.iter().map(|&v| v * s).collect())]
            }
            Op::AddScalar(a, _) => vec![(*a, g.to_vec())],
            Op::Square(a) => vec![(*a, ew(*a, &|x, _, g| T::of(2.0) * x * g))],
            Op::Exp(a) => vec![(*a, ew(*a, &|_, y, g| y * g))],
            Op::Sigmoid(a) => vec![(*a, ew(*a, &|_, y, g| y * (T::one() - y) * g))],
            Op::Silu(a) => vec![(*a, ew(*a, &|x, _, g| {
                let s = sigmoid_scalar(x);
                g * (s + x * s * (T::one() - s))
            }))],
            Op::Softplus(a) => vec![(*a, ew(*a, &|x, _, g| g * sigmoid_scalar(x)))],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.val(*a).numel()])],
            Op::Conv2d { x, w, b, geom } => {
                let grads = conv2d_backward(
                    geom,
                    self.val(*x).data(),
                    self.val(*w).data(),
                    g,
                    need(*x),
                    need(*w),
                    b.is_some_and(need),
                );
                let mut out = Vec::new();
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
                out
            }
            Op::Matmul(a, b) => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                let mut out = Vec::new();
                if need(*a) {
                    out.push((*a, matmul_t(&gt, false, self.val(*b), true)?.into_data()));
                }
                if need(*b) {
                    out.push((*b, matmul_t(self.val(*a), true, &gt, false)?.into_data()));
                }
                out
            }
            Op::Transpose(a) => vec![(*a, transpose(&Tensor::new(node.value.shape(), g.to_vec())?)?.into_data())],
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + k;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::Upsample2x(a) => {
                let s = self.val(*a).shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            let d = &mut dx[p * h * w + (yy / 2) * w + xx / 2];
                            *d = *d + src[yy * 2 * w + xx];
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                let mut out = Vec::new();
                for &xi in xs {
                    let len = self.val(xi).dim(*axis);
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dx.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    out.push((xi, dx));
                }
                out
            }
            Op::Narrow { x, axis, start } => {
                let (outer, alen, inner) = split_axis(self.val(*x).shape(), *axis);
                let len = node.value.dim(*axis);
                let mut dx = vec![T::zero(); outer * alen * inner];
                for o in 0..outer {
                    let base = (o * alen + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::ChannelAffine { x, scale, bias } => {
                let xv = self.val(*x);
                let sv = self.val(*scale).data();
                let (outer, c, inner) = split_axis(xv.shape(), 1);
                let mut dx = vec![T::zero(); g.len()];
                let mut ds = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let span = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                        for idx in span {
                            dx[idx] = g[idx] * sv[ch];
                            ds[ch] = ds[ch] + g[idx] * xv.data()[idx];
                            db[ch] = db[ch] + g[idx];
                        }
                    }
                }
                vec![(*x, dx), (*scale, ds), (*bias, db)]
            }
            Op::AreaAttention { q, k, v, cfg, .. } => {
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let n_el = qv.numel();
                let (mut dq, mut dk, mut dv) = (vec![T::zero(); n_el], vec![T::zero(); n_el], vec![T::zero(); n_el]);
                for_each_head(qv.shape(), cfg, |_, _, gather, scatter| {
                    let (qt, kt, vt, gt) = (gather(qv.data()), gather(kv.data()), gather(vv.data()), gather(g));
                    let tokens = qt.len() / cfg.head_dim;
                    let (mut a, mut b, mut c) = (vec![T::zero(); qt.len()], vec![T::zero(); qt.len()], vec![T::zero(); qt.len()]);
                    area_attention_backward(&qt, &kt, &vt, &gt, tokens, cfg.head_dim, cfg.num_areas, &mut a, &mut b, &mut c);
                    scatter(&a, &mut dq);
                    scatter(&b, &mut dk);
                    scatter(&c, &mut dv);
                    Ok(())
                })?;
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
        })
    }
}

type Gather<'f, T> = &'f dyn Fn(&[T]) -> Vec<T>;
type Scatter<'f, T> = &'f dyn Fn(&[T], &mut [T]);

/// Visits every (image, head) pair of an `N,C,H,W` tensor, handing the callback
/// helpers that convert between the channel-major layout and `[tokens, head_dim]`.
fn for_each_head<T: Real>(
    shape: &[usize],
    cfg: &AttentionConfig,
    mut f: impl FnMut(usize, usize, Gather<'_, T>, Scatter<'_, T>) -> Result<()>,
) -> Result<()> {
    let (n, c, tokens) = (shape[0], shape[1], shape[2] * shape[3]);
    let d = cfg.head_dim;
    for b in 0..n {
        for h in 0..cfg.num_heads {
            let base = (b * c + h * d) * tokens;
            let gather = move |src: &[T]| -> Vec<T> {
                let mut out = vec![T::zero(); tokens * d];
                for j in 0..d {
                    for t in 0..tokens {
                        out[t * d + j] = src[base + j * tokens + t];
                    }
                }
                out
            };
            let scatter = move |src: &[T], dst: &mut [T]| {
                for j in 0..d {
                    for t in 0..tokens {
                        dst[base + j * tokens + t] = src[t * d + j];
                    }
                }
            };
            f(b, h, &gather, &scatter)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dot_product_gradient_is_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant_ref(&x);
        let wv = g.leaf_ref(&w);
        let p = g.mul(xv, wv).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(wv).unwrap().bit_eq(&x));
        assert!(g.grad(xv).is_none());
        assert_eq!(g.leaf_with_grad(wv).grad_data().unwrap(), x.data());
    }

    #[test]
    fn silu_derivative_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.silu(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 0.5);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full(&[2], 3.0));
        let b = g.leaf(Tensor::full(&[5], 1.0));
        let loss = g.sum(a).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[0.0; 5]);
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = Σ (x·x + x) → grad = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.add(sq, x).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::uniform(&[2, 8, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::uniform(&[8, 8, 3, 3], -0.3, 0.3, &mut rng);
        let mut g = Graph::new().with_attention_kernel(Kernel::Tiled);
        let xv = g.leaf_ref(&x);
        let wv = g.leaf_ref(&w);
        let c = g.conv2d(xv, wv, None, 1, 1, 1).unwrap();
        let s = g.silu(c).unwrap();
        let cfg = AttentionConfig { num_heads: 2, head_dim: 4, num_areas: 4, tile_rows: 2, tile_cols: 3 };
        let a = g.area_attention(s, s, s, &cfg).unwrap();
        let u = g.upsample2x(a).unwrap();
        let n = g.narrow(u, 1, 2, 3).unwrap();
        let sm = g.softmax(n, 3).unwrap();
        let l = g.sum(sm).unwrap();
        g.verify_replay().unwrap();
        g.backward(l).unwrap();
    }

    #[test]
    fn flops_are_recorded_per_scope() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[1, 1, 1, 1]));
        g.set_scope("a");
        g.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(g.flops_by_scope()["a"], 32);
        let q = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        g.set_scope("b");
        let cfg = AttentionConfig { num_heads: 1, head_dim: 2, num_areas: 1, tile_rows: 4, tile_cols: 4 };
        g.area_attention(q, q, q, &cfg).unwrap();
        assert_eq!(g.flops_by_scope()["b"], crate::attention::attention_cost(4, 2, 1).unwrap().flops);
        assert_eq!(g.total_flops(), 32 + 128);
    }
}
