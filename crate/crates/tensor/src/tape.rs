use std::fmt;
use std::sync::Arc;

use crate::array::Tensor;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::{linalg, nn, shape};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the recorded operations; used for fault injection and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    ScaleRows,
    Silu,
    Sigmoid,
    Sum,
    Mean,
    Reshape,
    Transpose,
    Softmax,
    LayerNorm,
    Conv2d,
    ConvTranspose2d,
    Attention,
    Rope,
    GatherRows,
    ScatterRows,
    ConcatRows,
    GatherElems,
    FocalLoss,
    BceWithLogits,
    L1Loss,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddRow,
        OpKind::ScaleRows,
        OpKind::Silu,
        OpKind::Sigmoid,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::Attention,
        OpKind::Rope,
        OpKind::GatherRows,
        OpKind::ScatterRows,
        OpKind::ConcatRows,
        OpKind::GatherElems,
        OpKind::FocalLoss,
        OpKind::BceWithLogits,
        OpKind::L1Loss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRow => "add_row",
            OpKind::ScaleRows => "scale_rows",
            OpKind::Silu => "silu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "transposed_conv2d",
            OpKind::Attention => "attention",
            OpKind::Rope => "rope",
            OpKind::GatherRows => "gather_rows",
            OpKind::ScatterRows => "scatter_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GatherElems => "gather_elems",
            OpKind::FocalLoss => "focal_loss",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::L1Loss => "l1_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Convolution geometry shared by the forward and backward kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    AddRow { x: usize, bias: usize },
    ScaleRows { x: usize, s: usize },
    Silu { x: usize },
    Sigmoid { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    Reshape { x: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, cols: usize, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, cols: Vec<T> },
    ConvTranspose2d { x: usize, w: usize, geom: ConvGeom },
    Attention { q: usize, k: usize, v: usize, heads: usize, nq: usize, nk: usize, d: usize, probs: Vec<T> },
    Rope { x: usize, table: Arc<[T]>, head_dim: usize },
    GatherRows { x: usize, idx: Vec<usize>, cols: usize },
    ScatterRows { x: usize, idx: Vec<usize>, cols: usize },
    ConcatRows { parts: Vec<usize> },
    GatherElems { x: usize, idx: Vec<usize> },
    FocalLoss { logits: usize, target: Vec<T>, alpha: T, beta: T },
    BceWithLogits { logits: usize, target: Vec<T> },
    L1Loss { x: usize, target: Vec<T> },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::ScaleRows { .. } => OpKind::ScaleRows,
            Op::Silu { .. } => OpKind::Silu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::Attention { .. } => OpKind::Attention,
            Op::Rope { .. } => OpKind::Rope,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ScatterRows { .. } => OpKind::ScatterRows,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::GatherElems { .. } => OpKind::GatherElems,
            Op::FocalLoss { .. } => OpKind::FocalLoss,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::L1Loss { .. } => OpKind::L1Loss,
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::ScaleRows { x, s } => vec![*x, *s],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv2d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter().copied());
                p
            }
            Op::ConvTranspose2d { x, w, .. } => vec![*x, *w],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatRows { parts } => parts.clone(),
            Op::FocalLoss { logits, .. } | Op::BceWithLogits { logits, .. } => vec![*logits],
            Op::Scale { x, .. }
            | Op::Silu { x }
            | Op::Sigmoid { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x }
            | Op::Transpose { x, .. }
            | Op::Softmax { x, .. }
            | Op::Rope { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterRows { x, .. }
            | Op::GatherElems { x, .. }
            | Op::L1Loss { x, .. } => vec![*x],
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    flops: u64,
    sign_flip: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            flops: 0,
            sign_flip: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn add_flops(&mut self, flops: u64) {
        self.flops += flops;
    }

    /// Dense-algebra FLOPs recorded so far: two per multiply-accumulate in
    /// matmul, convolutions and attention products. Elementwise work is not
    /// counted.
    pub fn flops(&self) -> u64 {
        self.flops
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

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Negates the backward rule of one operation kind. Used to verify that
    /// the gradient checker detects a broken rule.
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.sign_flip = Some(kind);
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.sign_flip == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            backward_node(&self.nodes, i, &g, &mut sink);
            // Interior gradients are kept so callers can inspect them.
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.consumed = true;
        Ok(())
    }
}

/// Accumulates parent gradients during the reverse sweep.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    /// Zero-initialized gradient buffer for `id`, or `None` when `id` does
    /// not require a gradient.
    pub fn get(&mut self, id: usize) -> Option<&mut [T]> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let len = self.nodes[id].value.numel();
        Some(self.grads[id].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], sink: &mut GradSink<'_, T>) {
    let val = |id: usize| nodes[id].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => linalg::matmul_backward(val(*a), val(*b), g, *m, *k, *n, *a, *b, sink),
        Op::Add { a, b } => {
            for id in [*a, *b] {
                if let Some(d) = sink.get(id) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(d) = sink.get(*a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
            if let Some(d) = sink.get(*b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g);
            }
        }
        Op::Mul { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(d) = sink.get(*a) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                    *d = *d + g * y;
                }
            }
            if let Some(d) = sink.get(*b) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                    *d = *d + g * x;
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(d) = sink.get(*x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *c);
            }
        }
        Op::AddRow { x, bias } => {
            if let Some(d) = sink.get(*x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
            if let Some(d) = sink.get(*bias) {
                let n = d.len();
                for row in g.chunks_exact(n) {
                    d.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::ScaleRows { x, s } => shape::scale_rows_backward(val(*x), val(*s), g, *x, *s, sink),
        Op::Silu { x } => nn::silu_backward(val(*x), g, *x, sink),
        Op::Sigmoid { x } => {
            if let Some(d) = sink.get(*x) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    *d = *d + g * y * (T::one() - y);
                }
            }
        }
        Op::Sum { x } => {
            if let Some(d) = sink.get(*x) {
                d.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Mean { x } => {
            if let Some(d) = sink.get(*x) {
                let scale = g[0] / T::of(d.len() as f64);
                d.iter_mut().for_each(|d| *d = *d + scale);
            }
        }
        Op::Reshape { x } => {
            if let Some(d) = sink.get(*x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
        }
        Op::Transpose { x, rows, cols } => {
            if let Some(d) = sink.get(*x) {
                // out is cols × rows; d is rows × cols.
                for r in 0..*rows {
                    for c in 0..*cols {
                        d[r * cols + c] = d[r * cols + c] + g[c * rows + r];
                    }
                }
            }
        }
        Op::Softmax { x, outer, len, inner } => nn::softmax_backward(out, g, *outer, *len, *inner, *x, sink),
        Op::LayerNorm { x, gain, bias, cols, xhat, rstd } => {
            nn::layer_norm_backward(val(*gain), g, xhat, rstd, *cols, *x, *gain, *bias, sink)
        }
        Op::Conv2d { x, w, b, geom, cols } => linalg::conv2d_backward(val(*w), g, cols, geom, *x, *w, *b, sink),
        Op::ConvTranspose2d { x, w, geom } => linalg::conv_transpose2d_backward(val(*x), val(*w), g, geom, *x, *w, sink),
        Op::Attention { q, k, v, heads, nq, nk, d, probs } => linalg::attention_backward(
            val(*q),
            val(*k),
            val(*v),
            g,
            probs,
            linalg::AttnDims { heads: *heads, nq: *nq, nk: *nk, d: *d },
            [*q, *k, *v],
            sink,
        ),
        Op::Rope { x, table, head_dim } => nn::rope_backward(g, table, *head_dim, *x, sink),
        Op::GatherRows { x, idx, cols } => {
            if let Some(d) = sink.get(*x) {
                for (r, &src) in idx.iter().enumerate() {
                    let grow = &g[r * cols..(r + 1) * cols];
                    let drow = &mut d[src * cols..(src + 1) * cols];
                    drow.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::ScatterRows { x, idx, cols } => {
            if let Some(d) = sink.get(*x) {
                for (r, &dst) in idx.iter().enumerate() {
                    let grow = &g[dst * cols..(dst + 1) * cols];
                    let drow = &mut d[r * cols..(r + 1) * cols];
                    drow.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                if let Some(d) = sink.get(p) {
                    d.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, &g)| *d = *d + g);
                }
                offset += len;
            }
        }
        Op::GatherElems { x, idx } => {
            if let Some(d) = sink.get(*x) {
                for (&src, &g) in idx.iter().zip(g) {
                    d[src] = d[src] + g;
                }
            }
        }
        Op::FocalLoss { logits, target, alpha, beta } => {
            nn::focal_loss_backward(val(*logits), target, *alpha, *beta, g[0], *logits, sink)
        }
        Op::BceWithLogits { logits, target } => {
            if let Some(d) = sink.get(*logits) {
                for ((d, &x), &t) in d.iter_mut().zip(val(*logits)).zip(target) {
                    *d = *d + g[0] * (nn::sigmoid(x) - t);
                }
            }
        }
        Op::L1Loss { x, target } => {
            if let Some(d) = sink.get(*x) {
                for ((d, &x), &t) in d.iter_mut().zip(val(*x)).zip(target) {
                    let s = if x > t {
                        T::one()
                    } else if x < t {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *d = *d + g[0] * s;
                }
            }
        }
    }
}
