//! Define-by-run reverse-mode tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. Nodes are stored in execution order, so a node's inputs always
//! precede it and [`Tape::backward`] is a single reverse sweep.
//!
//! `backward` does not consume or mutate the tape: calling it twice with the
//! same loss yields bit-identical gradients, and calling it with different
//! losses of the same forward pass is how per-term gradients are obtained.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Result, TensorError};
use crate::ops::elementwise::{self, BinaryKind, UnaryKind};
use crate::ops::layout;
use crate::ops::matmul;
use crate::ops::norm::{self, LayerNormCache};
use crate::ops::reduce;
use crate::ops::sequence::{self, ScanGrads, ScanInputs};
use crate::tensor::Tensor;

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Unary(UnaryKind, usize),
    Matmul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Transpose(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: Option<usize>,
        bias: Option<usize>,
        cache: LayerNormCache,
    },
    SumAll {
        x: usize,
        scale: f64,
    },
    SumAxis {
        x: usize,
        axis: usize,
        scale: f64,
    },
    MaxAxis {
        x: usize,
        axis: usize,
        arg: Vec<usize>,
    },
    Reshape(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    IndexSelect {
        x: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    BroadcastTo(usize),
    CausalConv {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Scan {
        x: usize,
        delta: usize,
        a: usize,
        b: usize,
        c: usize,
        d: usize,
        states: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(..) => "binary",
            Op::Unary(..) => "unary",
            Op::Matmul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumAll { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::IndexSelect { .. } => "index_select",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::CausalConv { .. } => "causal_conv1d",
            Op::Scan { .. } => "selective_scan",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Unary(_, x)
            | Op::Transpose(x)
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::SumAll { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Reshape(x)
            | Op::Narrow { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::BroadcastTo(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => {
                let mut v = vec![*x];
                v.extend(gain.iter().chain(bias.iter()));
                v
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::CausalConv { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter());
                v
            }
            Op::Scan {
                x, delta, a, b, c, d, ..
            } => vec![*x, *delta, *a, *b, *c, *d],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: Cell<bool>,
    first_non_finite: Cell<Option<(usize, &'static str)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite: Cell::new(false),
            first_non_finite: Cell::new(None),
        }
    }

    /// Records the first node whose value contains NaN or ±∞.
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    /// Id and op name of the first non-finite value, when checking is on.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held by recorded values.
    pub fn resident_bytes(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .map(|n| n.value.numel() * std::mem::size_of::<f64>())
            .sum()
    }

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Handle for an existing node id.
    pub fn var(&self, id: usize) -> Var<'_> {
        assert!(id < self.len(), "node {id} not on tape");
        Var { tape: self, id }
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        if self.check_finite.get() && self.first_non_finite.get().is_none() && !value.is_finite() {
            let id = self.len();
            self.first_non_finite.set(Some((id, op.name())));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let rg = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_raw(value, op, rg)
    }

    fn values(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    fn own(&self, v: Var<'_>) -> Result<usize> {
        if std::ptr::eq(self, v.tape) {
            Ok(v.id)
        } else {
            Err(TensorError::contract("tape", "variable recorded on a different tape"))
        }
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let ids = parts.iter().map(|&p| self.own(p)).collect::<Result<Vec<_>>>()?;
        let value = {
            let nodes = self.values();
            let refs: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            layout::concat(&refs, axis)?
        };
        Ok(self.push(value, Op::Concat { parts: ids, axis }))
    }

    /// Selective scan over `x, delta: [.., T, D]` with `a: [D, N]`,
    /// `b, c: [.., T, N]`, `d_skip: [D]`. See [`sequence::selective_scan`].
    pub fn selective_scan<'t>(
        &'t self,
        x: Var<'t>,
        delta: Var<'t>,
        a: Var<'t>,
        b: Var<'t>,
        c: Var<'t>,
        d_skip: Var<'t>,
    ) -> Result<Var<'t>> {
        let ids = [x, delta, a, b, c, d_skip]
            .iter()
            .map(|&v| self.own(v))
            .collect::<Result<Vec<_>>>()?;
        let (value, states) = {
            let n = self.values();
            sequence::selective_scan(ScanInputs {
                x: &n[ids[0]].value,
                delta: &n[ids[1]].value,
                a: &n[ids[2]].value,
                b: &n[ids[3]].value,
                c: &n[ids[4]].value,
                d_skip: &n[ids[5]].value,
            })?
        };
        Ok(self.push(
            value,
            Op::Scan {
                x: ids[0],
                delta: ids[1],
                a: ids[2],
                b: ids[3],
                c: ids[4],
                d: ids[5],
                states,
            },
        ))
    }

    /// Hidden states `[batch, T, D, N]` saved by a scan node.
    pub fn scan_states(&self, v: Var<'_>) -> Option<Vec<f64>> {
        match &self.values()[v.id].op {
            Op::Scan { states, .. } => Some(states.clone()),
            _ => None,
        }
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let root = self.own(loss)?;
        let nodes = self.values();
        let lv = &nodes[root].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let out = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads: out })
    }

    // -- primitive recorders used by Var --

    fn unary(&self, x: usize, kind: UnaryKind) -> Var<'_> {
        let value = elementwise::unary_forward(kind, &self.values()[x].value);
        self.push(value, Op::Unary(kind, x))
    }

    fn binary(&self, kind: BinaryKind, a: usize, b: usize) -> Result<Var<'_>> {
        let value = {
            let n = self.values();
            elementwise::binary_forward(kind, &n[a].value, &n[b].value)?
        };
        Ok(self.push(value, Op::Binary(kind, a, b)))
    }
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// dLoss/dVar, or `None` when the loss does not depend on `v` through
    /// gradient-carrying paths.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

/// Gradient buffers for the inputs of one node. Repeated input ids get a
/// private buffer that is merged back after the kernel runs.
struct InputGrads {
    slots: Vec<(usize, Option<Vec<f64>>, bool)>,
}

impl InputGrads {
    fn take(nodes: &[Node], grads: &mut [Option<Vec<f64>>], ids: &[usize]) -> Self {
        let mut slots = Vec::with_capacity(ids.len());
        for (k, &id) in ids.iter().enumerate() {
            if !nodes[id].requires_grad {
                slots.push((id, None, false));
                continue;
            }
            let dup = ids[..k].contains(&id);
            let buf = if dup {
                vec![0.0; nodes[id].value.numel()]
            } else {
                grads[id].take().unwrap_or_else(|| vec![0.0; nodes[id].value.numel()])
            };
            slots.push((id, Some(buf), dup));
        }
        Self { slots }
    }

    fn get(&mut self, k: usize) -> Option<&mut [f64]> {
        self.slots[k].1.as_deref_mut()
    }

    /// Disjoint mutable access to all slots at once.
    fn all(&mut self) -> Vec<Option<&mut [f64]>> {
        self.slots.iter_mut().map(|s| s.1.as_deref_mut()).collect()
    }

    fn restore(self, grads: &mut [Option<Vec<f64>>]) {
        // firsts before duplicates so that duplicates merge into them
        let (firsts, dups): (Vec<_>, Vec<_>) = self.slots.into_iter().partition(|s| !s.2);
        for (id, buf, _) in firsts {
            if let Some(buf) = buf {
                grads[id] = Some(buf);
            }
        }
        for (id, buf, _) in dups {
            if let (Some(buf), Some(dst)) = (buf, grads[id].as_mut()) {
                for (d, v) in dst.iter_mut().zip(buf) {
                    *d += v;
                }
            }
        }
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let ids = node.op.inputs();
    let mut ig = InputGrads::take(nodes, grads, &ids);
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let mut bufs = ig.all();
            let gb = bufs.pop().flatten();
            let ga = bufs.pop().flatten();
            elementwise::binary_backward(*kind, val(*a), val(*b), node.value.shape(), g, ga, gb);
        }
        Op::Unary(kind, x) => {
            if let Some(gx) = ig.get(0) {
                elementwise::unary_backward(*kind, val(*x), &node.value, g, gx);
            }
        }
        Op::Matmul { a, b, trans_b } => {
            let mut bufs = ig.all();
            let gb = bufs.pop().flatten();
            let ga = bufs.pop().flatten();
            matmul::backward(val(*a), val(*b), *trans_b, g, ga, gb);
        }
        Op::Transpose(_) => {
            if let Some(gx) = ig.get(0) {
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let back = matmul::transpose_last2(&gt).expect("rank checked in forward");
                for (d, v) in gx.iter_mut().zip(back.data()) {
                    *d += v;
                }
            }
        }
        Op::Softmax { axis, .. } => {
            if let Some(gx) = ig.get(0) {
                norm::softmax_backward(&node.value, *axis, g, gx);
            }
        }
        Op::LogSoftmax { axis, .. } => {
            if let Some(gx) = ig.get(0) {
                norm::log_softmax_backward(&node.value, *axis, g, gx);
            }
        }
        Op::LayerNorm { x, gain, bias, cache } => {
            let width = *val(*x).shape().last().unwrap();
            let gain_t = gain.map(val);
            let mut bufs = ig.all().into_iter();
            let gx = bufs.next().flatten();
            let gg = if gain.is_some() { bufs.next().flatten() } else { None };
            let gbias = if bias.is_some() { bufs.next().flatten() } else { None };
            norm::layer_norm_backward(cache, gain_t, width, g, gx, gg, gbias);
        }
        Op::SumAll { scale, .. } => {
            if let Some(gx) = ig.get(0) {
                let v = g[0] * scale;
                gx.iter_mut().for_each(|d| *d += v);
            }
        }
        Op::SumAxis { x, axis, scale } => {
            if let Some(gx) = ig.get(0) {
                reduce::sum_axis_backward(val(*x).shape(), *axis, *scale, g, gx);
            }
        }
        Op::MaxAxis { x, axis, arg } => {
            if let Some(gx) = ig.get(0) {
                reduce::max_axis_backward(val(*x).shape(), *axis, arg, g, gx);
            }
        }
        Op::Reshape(_) => {
            if let Some(gx) = ig.get(0) {
                for (d, v) in gx.iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
        Op::Concat { parts, axis } => {
            let extents: Vec<usize> = parts.iter().map(|&p| val(p).shape()[*axis]).collect();
            for (k, buf) in ig.all().into_iter().enumerate() {
                if let Some(gx) = buf {
                    layout::concat_backward(&extents, node.value.shape(), *axis, k, g, gx);
                }
            }
        }
        Op::Narrow { x, axis, start, len } => {
            if let Some(gx) = ig.get(0) {
                layout::narrow_backward(val(*x).shape(), *axis, *start, *len, g, gx);
            }
        }
        Op::IndexSelect { x, axis, indices } => {
            if let Some(gx) = ig.get(0) {
                layout::index_select_backward(val(*x).shape(), *axis, indices, g, gx);
            }
        }
        Op::BroadcastTo(x) => {
            if let Some(gx) = ig.get(0) {
                layout::broadcast_to_backward(val(*x).shape(), node.value.shape(), g, gx);
            }
        }
        Op::CausalConv { x, w, b } => {
            let mut bufs = ig.all().into_iter();
            let gx = bufs.next().flatten();
            let gw = bufs.next().flatten();
            let gb = if b.is_some() { bufs.next().flatten() } else { None };
            sequence::causal_conv1d_backward(val(*x), val(*w), g, gx, gw, gb);
        }
        Op::Scan {
            x,
            delta,
            a,
            b,
            c,
            d,
            states,
        } => {
            let inp = ScanInputs {
                x: val(*x),
                delta: val(*delta),
                a: val(*a),
                b: val(*b),
                c: val(*c),
                d_skip: val(*d),
            };
            let mut bufs = ig.all().into_iter();
            let out = ScanGrads {
                x: bufs.next().flatten(),
                delta: bufs.next().flatten(),
                a: bufs.next().flatten(),
                b: bufs.next().flatten(),
                c: bufs.next().flatten(),
                d_skip: bufs.next().flatten(),
            };
            sequence::selective_scan_backward(inp, states, g, out);
        }
    }
    ig.restore(grads);
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.values()[self.id].value.shape().to_vec()
    }

    pub fn value(self) -> Tensor {
        self.tape.values()[self.id].value.clone()
    }

    pub fn item(self) -> f64 {
        self.tape.values()[self.id].value.item()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.values()[self.id].requires_grad
    }

    fn other(self, o: Var<'_>) -> Result<usize> {
        self.tape.own(o)
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinaryKind::Add, self.id, self.other(o)?)
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinaryKind::Sub, self.id, self.other(o)?)
    }

    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinaryKind::Mul, self.id, self.other(o)?)
    }

    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinaryKind::Div, self.id, self.other(o)?)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, UnaryKind::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, UnaryKind::AddScalar(c))
    }

    pub fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, UnaryKind::Neg)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, UnaryKind::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, UnaryKind::Log)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self.id, UnaryKind::Sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, UnaryKind::Square)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, UnaryKind::Tanh)
    }

    pub fn activation(self, kind: Activation) -> Var<'t> {
        let k = match kind {
            Activation::Gelu => UnaryKind::Gelu,
            Activation::Silu => UnaryKind::Silu,
            Activation::Relu => UnaryKind::Relu,
        };
        self.tape.unary(self.id, k)
    }

    pub fn gelu(self) -> Var<'t> {
        self.activation(Activation::Gelu)
    }

    pub fn silu(self) -> Var<'t> {
        self.activation(Activation::Silu)
    }

    pub fn relu(self) -> Var<'t> {
        self.activation(Activation::Relu)
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self.id, UnaryKind::Softplus)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, UnaryKind::Sigmoid)
    }

    /// `self · rhs` for `[.., m, k] × [k, n]` or batched `[.., m, k] × [.., k, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.mm(rhs, false)
    }

    /// `self · rhsᵀ` with `rhs: [n, k]` or `[.., n, k]`.
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.mm(rhs, true)
    }

    fn mm(self, rhs: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let b = self.other(rhs)?;
        let value = {
            let n = self.tape.values();
            matmul::forward(&n[self.id].value, &n[b].value, trans_b)?
        };
        Ok(self.tape.push(value, Op::Matmul { a: self.id, b, trans_b }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = matmul::transpose_last2(&self.tape.values()[self.id].value)?;
        Ok(self.tape.push(value, Op::Transpose(self.id)))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = norm::softmax(&self.tape.values()[self.id].value, axis)?;
        Ok(self.tape.push(value, Op::Softmax { x: self.id, axis }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = norm::log_softmax(&self.tape.values()[self.id].value, axis)?;
        Ok(self.tape.push(value, Op::LogSoftmax { x: self.id, axis }))
    }

    /// Normalizes over the last axis.
    pub fn layer_norm(self, gain: Option<Var<'t>>, bias: Option<Var<'t>>, eps: f64) -> Result<Var<'t>> {
        let gain = gain.map(|g| self.other(g)).transpose()?;
        let bias = bias.map(|b| self.other(b)).transpose()?;
        let (value, cache) = {
            let n = self.tape.values();
            norm::layer_norm(
                &n[self.id].value,
                gain.map(|g| &n[g].value),
                bias.map(|b| &n[b].value),
                eps,
            )?
        };
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain,
                bias,
                cache,
            },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let value = reduce::sum_all(&self.tape.values()[self.id].value);
        self.tape.push(value, Op::SumAll { x: self.id, scale: 1.0 })
    }

    pub fn mean(self) -> Var<'t> {
        let (value, n) = {
            let v = &self.tape.values()[self.id].value;
            (Tensor::scalar(reduce::sum_all(v).item() / v.numel() as f64), v.numel())
        };
        self.tape.push(
            value,
            Op::SumAll {
                x: self.id,
                scale: 1.0 / n as f64,
            },
        )
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let value = reduce::sum_axis(&self.tape.values()[self.id].value, axis, keepdim)?;
        Ok(self.tape.push(
            value,
            Op::SumAxis {
                x: self.id,
                axis,
                scale: 1.0,
            },
        ))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let (value, len) = {
            let v = &self.tape.values()[self.id].value;
            let s = reduce::sum_axis(v, axis, keepdim)?;
            let len = v.shape()[axis] as f64;
            (s.map(|x| x / len), len)
        };
        Ok(self.tape.push(
            value,
            Op::SumAxis {
                x: self.id,
                axis,
                scale: 1.0 / len,
            },
        ))
    }

    /// Max along `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let (value, arg) = reduce::max_axis(&self.tape.values()[self.id].value, axis, keepdim)?;
        Ok(self.tape.push(value, Op::MaxAxis { x: self.id, axis, arg }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.values()[self.id].value.clone().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id)))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = layout::narrow(&self.tape.values()[self.id].value, axis, start, len)?;
        Ok(self.tape.push(
            value,
            Op::Narrow {
                x: self.id,
                axis,
                start,
                len,
            },
        ))
    }

    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let value = layout::index_select(&self.tape.values()[self.id].value, axis, indices)?;
        Ok(self.tape.push(
            value,
            Op::IndexSelect {
                x: self.id,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = layout::broadcast_to(&self.tape.values()[self.id].value, shape)?;
        Ok(self.tape.push(value, Op::BroadcastTo(self.id)))
    }

    /// Depthwise causal convolution over `[.., T, C]` with `weight: [C, W]`.
    pub fn causal_conv1d(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let w = self.other(weight)?;
        let b = bias.map(|b| self.other(b)).transpose()?;
        let value = {
            let n = self.tape.values();
            sequence::causal_conv1d(&n[self.id].value, &n[w].value, b.map(|b| &n[b].value))?
        };
        Ok(self.tape.push(value, Op::CausalConv { x: self.id, w, b }))
    }

    /// Unit-norm rows along the last axis: `x / sqrt(Σx² + eps)`.
    pub fn l2_normalize(self, eps: f64) -> Result<Var<'t>> {
        let rank = self.shape().len();
        let norm = self.square().sum_axis(rank - 1, true)?.add_scalar(eps).sqrt();
        self.div(norm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Gelu,
    Silu,
    Relu,
}
