//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding its
//! output value and the parent ids needed by the backward rule. [`Var`] is a
//! cheap copyable handle to a node. Calling [`Tape::backward`] on a scalar walks
//! the nodes in reverse insertion order, which is a valid topological order
//! because parents are always recorded before their children.
//!
//! The tape is meant to be built per forward pass and dropped after backward.

use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::sync::Arc;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Arc<Tensor>),
    Gelu(usize),
    Relu(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropySoft {
        logits: usize,
        targets: Arc<Tensor>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    MeanRows(usize),
    Sum(usize),
    Mean(usize),
    RatioNormalize {
        scores: usize,
        mask: Arc<Tensor>,
        denom: Vec<f64>,
        fallback: Vec<bool>,
    },
    MaskedSoftmax {
        scores: usize,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder for one forward/backward cycle.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` does not require grad or
    /// is unreachable from the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub(crate) fn take(&mut self, id: usize) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn value(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an input tensor. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub(crate) fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    /// Concatenates tensors along `axis`; all other axes must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("concat of zero tensors"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| self.value(p.id)).collect();
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", &base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_axis: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total_axis;
        let rg = parts.iter().any(|p| self.rg(p.id));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Backpropagates from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::dim("backward", nodes[loss.id].value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::filled(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn with_shape(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("backward produced mismatched gradient")
}

fn backward_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let out = &node.value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[*a].requires_grad {
                let ga = matmul_bt_raw(gd, bv.data(), m, n, k);
                accumulate(grads, nodes, *a, with_shape(av.shape(), ga));
            }
            if nodes[*b].requires_grad {
                let gb = matmul_at_raw(av.data(), gd, m, k, n);
                accumulate(grads, nodes, *b, with_shape(bv.shape(), gb));
            }
        }
        Op::MatMulBt(a, b) => {
            // c[m x n] = a[m x k] * b[n x k]^T
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
            if nodes[*a].requires_grad {
                let ga = matmul_raw(gd, bv.data(), m, n, k);
                accumulate(grads, nodes, *a, with_shape(av.shape(), ga));
            }
            if nodes[*b].requires_grad {
                let gb = matmul_at_raw(gd, av.data(), m, n, k);
                accumulate(grads, nodes, *b, with_shape(bv.shape(), gb));
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[j * r + i] = gd[i * c + j];
                }
            }
            accumulate(grads, nodes, *x, with_shape(nodes[*x].value.shape(), gx));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            let neg = gd.iter().map(|v| -v).collect();
            accumulate(grads, nodes, *b, with_shape(g.shape(), neg));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let ga = gd.iter().zip(bv.data()).map(|(g, b)| g * b).collect();
            let gb = gd.iter().zip(av.data()).map(|(g, a)| g * a).collect();
            accumulate(grads, nodes, *a, with_shape(g.shape(), ga));
            accumulate(grads, nodes, *b, with_shape(g.shape(), gb));
        }
        Op::AddRow(a, bias) => {
            accumulate(grads, nodes, *a, g.clone());
            if nodes[*bias].requires_grad {
                let d = g.cols();
                let mut gb = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, nodes, *bias, with_shape(nodes[*bias].value.shape(), gb));
            }
        }
        Op::Scale(x, s) => {
            let gx = gd.iter().map(|v| v * s).collect();
            accumulate(grads, nodes, *x, with_shape(g.shape(), gx));
        }
        Op::MulConst(x, c) => {
            let gx = gd.iter().zip(c.data()).map(|(g, c)| g * c).collect();
            accumulate(grads, nodes, *x, with_shape(g.shape(), gx));
        }
        Op::Gelu(x) => {
            let xv = &nodes[*x].value;
            let gx = gd
                .iter()
                .zip(xv.data())
                .map(|(g, &x)| g * gelu_grad(x))
                .collect();
            accumulate(grads, nodes, *x, with_shape(g.shape(), gx));
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].value;
            let gx = gd
                .iter()
                .zip(xv.data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *x, with_shape(g.shape(), gx));
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| gd[idx(a)] * y[idx(a)]).sum();
                    for a in 0..len {
                        gx[idx(a)] = y[idx(a)] * (gd[idx(a)] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *x, with_shape(out.shape(), gx));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = out.cols();
            let gainv = nodes[*gain].value.data().to_vec();
            if nodes[*x].requires_grad {
                let mut gx = vec![0.0; gd.len()];
                for (r, istd) in inv_std.iter().enumerate() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let dxh: Vec<f64> = gr.iter().zip(&gainv).map(|(g, w)| g * w).collect();
                    let sum_dxh: f64 = dxh.iter().sum();
                    let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] =
                            istd / d as f64 * (d as f64 * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                accumulate(grads, nodes, *x, with_shape(out.shape(), gx));
            }
            let mut ggain = vec![0.0; d];
            let mut gbias = vec![0.0; d];
            for (gr, xh) in gd.chunks(d).zip(xhat.chunks(d)) {
                for j in 0..d {
                    ggain[j] += gr[j] * xh[j];
                    gbias[j] += gr[j];
                }
            }
            accumulate(grads, nodes, *gain, with_shape(&[d], ggain));
            accumulate(grads, nodes, *bias, with_shape(&[d], gbias));
        }
        Op::CrossEntropySoft {
            logits,
            targets,
            probs,
        } => {
            let c = targets.cols();
            let n = targets.rows();
            let scale = gd[0] / n as f64;
            let mut gl = vec![0.0; probs.len()];
            for r in 0..n {
                let t = targets.row(r);
                let tsum: f64 = t.iter().sum();
                for j in 0..c {
                    gl[r * c + j] = scale * (probs[r * c + j] * tsum - t[j]);
                }
            }
            accumulate(grads, nodes, *logits, with_shape(nodes[*logits].value.shape(), gl));
        }
        Op::BceWithLogits { logits, targets } => {
            let lv = &nodes[*logits].value;
            let n = targets.len() as f64;
            let gl = lv
                .data()
                .iter()
                .zip(targets)
                .map(|(s, t)| gd[0] * (sigmoid(*s) - t) / n)
                .collect();
            accumulate(grads, nodes, *logits, with_shape(lv.shape(), gl));
        }
        Op::GatherRows { table, ids } => {
            if nodes[*table].requires_grad {
                let tv = &nodes[*table].value;
                let d = tv.cols();
                let mut gt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gd[r * d + j];
                    }
                }
                accumulate(grads, nodes, *table, with_shape(tv.shape(), gt));
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let total_chunk = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let pv = &nodes[p].value;
                let chunk = pv.shape()[*axis] * inner;
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(pv.numel());
                    for o in 0..outer {
                        let start = o * total_chunk + offset;
                        gp.extend_from_slice(&gd[start..start + chunk]);
                    }
                    accumulate(grads, nodes, p, with_shape(pv.shape(), gp));
                }
                offset += chunk;
            }
        }
        Op::SliceCols { x, start } => {
            let xv = &nodes[*x].value;
            let (rows, cols) = (xv.rows(), xv.cols());
            let len = out.cols();
            let mut gx = vec![0.0; xv.numel()];
            for r in 0..rows {
                gx[r * cols + start..r * cols + start + len]
                    .copy_from_slice(&gd[r * len..(r + 1) * len]);
            }
            accumulate(grads, nodes, *x, with_shape(xv.shape(), gx));
        }
        Op::MeanRows(x) => {
            let xv = &nodes[*x].value;
            let n = xv.rows() as f64;
            let d = xv.cols();
            let mut gx = Vec::with_capacity(xv.numel());
            for _ in 0..xv.rows() {
                gx.extend(gd[..d].iter().map(|v| v / n));
            }
            accumulate(grads, nodes, *x, with_shape(xv.shape(), gx));
        }
        Op::Sum(x) => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, Tensor::filled(xv.shape(), gd[0]));
        }
        Op::Mean(x) => {
            let xv = &nodes[*x].value;
            let n = xv.numel() as f64;
            accumulate(grads, nodes, *x, Tensor::filled(xv.shape(), gd[0] / n));
        }
        Op::RatioNormalize {
            scores,
            mask,
            denom,
            fallback,
        } => {
            let c = out.cols();
            let w = out.data();
            let mut gs = vec![0.0; w.len()];
            for (r, (den, fb)) in denom.iter().zip(fallback).enumerate() {
                if *fb {
                    continue;
                }
                let gw: f64 = (0..c).map(|j| gd[r * c + j] * w[r * c + j]).sum();
                for j in 0..c {
                    gs[r * c + j] = mask.data()[r * c + j] * (gd[r * c + j] - gw) / den;
                }
            }
            accumulate(grads, nodes, *scores, with_shape(out.shape(), gs));
        }
        Op::MaskedSoftmax { scores } => {
            let c = out.cols();
            let w = out.data();
            let mut gs = vec![0.0; w.len()];
            for r in 0..out.rows() {
                let gw: f64 = (0..c).map(|j| gd[r * c + j] * w[r * c + j]).sum();
                for j in 0..c {
                    gs[r * c + j] = w[r * c + j] * (gd[r * c + j] - gw);
                }
            }
            accumulate(grads, nodes, *scores, with_shape(out.shape(), gs));
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable softmax of one slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf_shared(self.value(), false)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn as_matrix(&self, op: &'static str) -> Result<(Arc<Tensor>, usize, usize)> {
        let v = self.value();
        if v.shape().len() != 2 {
            return Err(Error::dim(op, v.shape(), &[0, 0]));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        Ok((v, r, c))
    }

    /// `self[m x k] * other[k x n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, m, k) = self.as_matrix("matmul")?;
        let (b, k2, n) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        Ok(self.binary(
            other,
            Tensor::new(vec![m, n], data)?,
            Op::MatMul(self.id, other.id),
        ))
    }

    /// `self[m x k] * other[n x k]^T`.
    pub fn matmul_bt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, m, k) = self.as_matrix("matmul_bt")?;
        let (b, n, k2) = other.as_matrix("matmul_bt")?;
        if k != k2 {
            return Err(Error::dim("matmul_bt", a.shape(), b.shape()));
        }
        let data = matmul_bt_raw(a.data(), b.data(), m, k, n);
        Ok(self.binary(
            other,
            Tensor::new(vec![m, n], data)?,
            Op::MatMulBt(self.id, other.id),
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (a, r, c) = self.as_matrix("transpose")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data()[i * c + j];
            }
        }
        Ok(self.unary(Tensor::new(vec![c, r], data)?, Op::Transpose(self.id)))
    }

    fn zip_with(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Adds a length-`d` vector to every row of a `[.. x d]` tensor.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        let d = a.cols();
        if b.numel() != d {
            return Err(Error::dim("add_row", a.shape(), b.shape()));
        }
        let data = a
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
            .collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(bias, v, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * s).collect();
        let v = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.unary(v, Op::Scale(self.id, s))
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&self, c: Tensor) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return Err(Error::dim("mul_const", a.shape(), c.shape()));
        }
        let data = a.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(v, Op::MulConst(self.id, Arc::new(c))))
    }

    /// Tanh-approximated GeLU.
    pub fn gelu(&self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| gelu(x)).collect();
        self.unary(
            Tensor::new(a.shape().to_vec(), data).expect("same shape"),
            Op::Gelu(self.id),
        )
    }

    pub fn relu(&self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x.max(0.0)).collect();
        self.unary(
            Tensor::new(a.shape().to_vec(), data).expect("same shape"),
            Op::Relu(self.id),
        )
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.shape().len() {
            return Err(Error::dim("softmax", a.shape(), &[axis]));
        }
        if !a.is_finite() {
            return Err(Error::numeric("softmax input contains non-finite values"));
        }
        let (outer, len, inner) = axis_split(a.shape(), axis);
        let x = a.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - max).exp();
                    y[idx(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    y[idx(k)] /= s;
                }
            }
        }
        Ok(self.unary(
            Tensor::new(a.shape().to_vec(), y)?,
            Op::Softmax { x: self.id, axis },
        ))
    }

    /// Layer normalisation over the last axis followed by `gain * xhat + bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let a = self.value();
        let d = a.cols();
        let (gv, bv) = (gain.value(), bias.value());
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::dim("layer_norm", a.shape(), gv.shape()));
        }
        let mut xhat = Vec::with_capacity(a.numel());
        let mut inv_std = Vec::with_capacity(a.rows());
        let mut out = Vec::with_capacity(a.numel());
        for row in a.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over rows of `-sum_c target * log_softmax(logits)`.
    ///
    /// Every target row must be a probability distribution (sum 1 within 1e-6).
    pub fn cross_entropy_soft(&self, targets: Tensor) -> Result<Var<'t>> {
        let l = self.value();
        if l.shape().len() != 2 || l.shape() != targets.shape() {
            return Err(Error::dim("cross_entropy_soft", l.shape(), targets.shape()));
        }
        let c = l.cols();
        let n = l.rows();
        if n == 0 {
            return Err(Error::validation("cross_entropy_soft over zero rows"));
        }
        for r in 0..n {
            let row = targets.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < 0.0) {
                return Err(Error::validation(format!(
                    "target row {r} is not a distribution (sum {s})"
                )));
            }
        }
        if !l.is_finite() {
            return Err(Error::numeric("cross_entropy_soft logits are non-finite"));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for r in 0..n {
            let row = l.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let t = targets.row(r);
            for j in 0..c {
                probs.push((row[j] - lse).exp());
                if t[j] != 0.0 {
                    total -= t[j] * (row[j] - lse);
                }
            }
        }
        Ok(self.unary(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropySoft {
                logits: self.id,
                targets: Arc::new(targets),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Var<'t>> {
        let l = self.value();
        if l.numel() != targets.len() || targets.is_empty() {
            return Err(Error::dim("bce_with_logits", l.shape(), &[targets.len()]));
        }
        let n = targets.len() as f64;
        let loss = l
            .data()
            .iter()
            .zip(targets)
            .map(|(s, t)| softplus(*s) - t * s)
            .sum::<f64>()
            / n;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: self.id,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Selects rows of a 2-D table; also serves as embedding lookup.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let (t, r, d) = self.as_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= r {
                return Err(Error::validation(format!(
                    "row index {id} out of range for table with {r} rows"
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        Ok(self.unary(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let (t, r, c) = self.as_matrix("slice_cols")?;
        if start + len > c {
            return Err(Error::dim("slice_cols", t.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        Ok(self.unary(
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols { x: self.id, start },
        ))
    }

    pub fn rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let ids: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&ids)
    }

    /// Mean over rows: `[n x d] -> [1 x d]`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let (t, r, d) = self.as_matrix("mean_rows")?;
        if r == 0 {
            return Err(Error::validation("mean_rows of an empty matrix"));
        }
        let mut data = vec![0.0; d];
        for i in 0..r {
            for (acc, v) in data.iter_mut().zip(t.row(i)) {
                *acc += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.unary(Tensor::new(vec![1, d], data)?, Op::MeanRows(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Row-wise ratio normalisation `w_j = m_j s_j / sum_k m_k s_k`.
    ///
    /// `mask` holds 0/1 per entry. Weights may be negative. A row whose
    /// |denominator| falls below `eps_den` gets uniform weights over its
    /// unmasked entries and contributes no gradient.
    pub fn ratio_normalize(&self, mask: Tensor, eps_den: f64) -> Result<Var<'t>> {
        let s = self.value();
        if s.shape() != mask.shape() || s.shape().len() != 2 {
            return Err(Error::dim("ratio_normalize", s.shape(), mask.shape()));
        }
        let c = s.cols();
        let mut out = vec![0.0; s.numel()];
        let mut denom = Vec::with_capacity(s.rows());
        let mut fallback = Vec::with_capacity(s.rows());
        for r in 0..s.rows() {
            let m = mask.row(r);
            let live: f64 = m.iter().sum();
            if live == 0.0 {
                return Err(Error::validation(
                    "every confounder entry is excluded for this query",
                ));
            }
            let d: f64 = s.row(r).iter().zip(m).map(|(a, b)| a * b).sum();
            let fb = d.abs() < eps_den;
            for j in 0..c {
                out[r * c + j] = if fb {
                    m[j] / live
                } else {
                    m[j] * s.row(r)[j] / d
                };
            }
            denom.push(d);
            fallback.push(fb);
        }
        Ok(self.unary(
            Tensor::new(s.shape().to_vec(), out)?,
            Op::RatioNormalize {
                scores: self.id,
                mask: Arc::new(mask),
                denom,
                fallback,
            },
        ))
    }

    /// Row-wise softmax restricted to entries with mask 1; masked entries get 0.
    pub fn masked_softmax(&self, mask: &Tensor) -> Result<Var<'t>> {
        let s = self.value();
        if s.shape() != mask.shape() || s.shape().len() != 2 {
            return Err(Error::dim("masked_softmax", s.shape(), mask.shape()));
        }
        let c = s.cols();
        let mut out = vec![0.0; s.numel()];
        for r in 0..s.rows() {
            let m = mask.row(r);
            let row = s.row(r);
            let live: Vec<usize> = (0..c).filter(|&j| m[j] != 0.0).collect();
            if live.is_empty() {
                return Err(Error::validation(
                    "every confounder entry is excluded for this query",
                ));
            }
            let max = live.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = live.iter().map(|&j| (row[j] - max).exp()).sum();
            for &j in &live {
                out[r * c + j] = (row[j] - max).exp() / z;
            }
        }
        Ok(self.unary(
            Tensor::new(s.shape().to_vec(), out)?,
            Op::MaskedSoftmax { scores: self.id },
        ))
    }
}
