//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node in an
//! append-only arena. Because a node can only reference nodes created before
//! it, arena order is a topological order and [`Graph::backward`] is a single
//! reverse sweep. Graphs are meant to be built, differentiated once and
//! dropped; parallelism happens across graphs, never within one.

use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Transpose(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    BroadcastRows(Var),
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    MatMul(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Maximum(..) => "maximum",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Clamp(..) => "clamp",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll(_) => "sum_all",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MatMul(..) => "matmul",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Maximum(a, b)
            | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Offset(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Clamp(x, ..)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::BroadcastRows(x)
            | Op::SumAll(x) => vec![*x],
            Op::Narrow { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Softmax { x, .. }
            | Op::LayerNorm { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Whether `ancestor` is reachable from `v` through parent links.
    pub fn depends_on(&self, v: Var, ancestor: Var) -> bool {
        if ancestor.0 > v.0 {
            return false;
        }
        let mut seen = vec![false; v.0 + 1];
        let mut stack = vec![v];
        while let Some(cur) = stack.pop() {
            if cur == ancestor {
                return true;
            }
            if std::mem::replace(&mut seen[cur.0], true) {
                continue;
            }
            stack.extend(self.parents(cur).into_iter().filter(|p| p.0 >= ancestor.0));
        }
        false
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>)> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() {
            Ok((Bcast::Same, sa.shape().to_vec()))
        } else if sa.numel() == 1 {
            Ok((Bcast::LeftScalar, sb.shape().to_vec()))
        } else if sb.numel() == 1 {
            Ok((Bcast::RightScalar, sa.shape().to_vec()))
        } else {
            Err(Error::shape(op, sa.shape(), sb.shape()))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (mode, shape) = self.bcast(name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = match mode {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::LeftScalar => db.iter().map(|&y| f(da[0], y)).collect(),
            Bcast::RightScalar => da.iter().map(|&x| f(x, db[0])).collect(),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// Elementwise sum; one side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.unary(x, v, Op::Scale(x, c))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.unary(x, v, Op::Offset(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(0.0));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| {
            if e >= 0.0 {
                1.0 / (1.0 + (-e).exp())
            } else {
                let z = e.exp();
                z / (1.0 + z)
            }
        });
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.unary(x, v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.unary(x, v, Op::Ln(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|e| e.clamp(lo, hi));
        self.unary(x, v, Op::Clamp(x, lo, hi))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.unary(x, v, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        Ok(self.unary(x, v, Op::Narrow { x, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Repeats a `[p]` or `[1, p]` tensor into `[rows, p]`.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let t = self.value(x);
        let p = match t.shape() {
            [p] | [1, p] => *p,
            other => {
                return Err(Error::invalid(format!(
                    "broadcast_rows needs [p] or [1, p], got {other:?}"
                )))
            }
        };
        if rows == 0 {
            return Err(Error::invalid("broadcast_rows to zero rows"));
        }
        let mut data = Vec::with_capacity(rows * p);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        Ok(self.unary(
            x,
            Tensor::from_parts(vec![rows, p], data),
            Op::BroadcastRows(x),
        ))
    }

    fn reduce_axis(&self, x: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        let (outer, ext, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let src = &t.data()[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        Ok((shape, out))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, data) = self.reduce_axis(x, axis)?;
        Ok(self.unary(x, Tensor::from_parts(shape, data), Op::Sum { x, axis }))
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ext = self.value(x).shape().get(axis).copied().unwrap_or(1) as f64;
        let (shape, mut data) = self.reduce_axis(x, axis)?;
        data.iter_mut().for_each(|v| *v /= ext);
        Ok(self.unary(x, Tensor::from_parts(shape, data), Op::Mean { x, axis }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::SumAll(x))
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        let (outer, ext, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * ext + a) * inner + i;
                let max = (0..ext)
                    .map(|a| src[idx(a)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..ext {
                    let e = (src[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..ext {
                    out[idx(a)] /= total;
                }
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.unary(x, Tensor::from_parts(shape, out), Op::Softmax { x, axis }))
    }

    /// Normalises each slice along the last axis to zero mean, unit variance
    /// (with [`LAYER_NORM_EPS`] added to the variance). No affine transform.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm on a scalar"))?;
        let rows = t.numel() / cols;
        let mut out = vec![0.0; t.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = t.shape().to_vec();
        Ok(self.unary(
            x,
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, inv_std },
        ))
    }

    /// Matrix product over the last two axes; leading batch axes must agree.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let ra = sa.len();
        if ra < 2 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] || sa[ra - 1] != sb[ra - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, p) = (sa[ra - 2], sa[ra - 1], sb[ra - 1]);
        let batch: usize = sa[..ra - 2].iter().product();
        let mut out = vec![0.0; batch * m * p];
        for bi in 0..batch {
            matmul_into(
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                &tb.data()[bi * k * p..(bi + 1) * k * p],
                &mut out[bi * m * p..(bi + 1) * m * p],
                m,
                k,
                p,
            );
        }
        let mut shape = sa.to_vec();
        shape[ra - 1] = p;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires them. Gradients from several consumers of a node add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn accumulate_binary(&mut self, v: Var, mode: Bcast, is_left: bool, contrib: Vec<f64>) {
        let scalar_side = matches!(
            (mode, is_left),
            (Bcast::LeftScalar, true) | (Bcast::RightScalar, false)
        );
        if scalar_side {
            let total: f64 = contrib.iter().sum();
            self.accumulate(v, |slot| slot[0] += total);
        } else {
            self.accumulate(v, |slot| {
                slot.iter_mut().zip(&contrib).for_each(|(s, c)| *s += c)
            });
        }
    }

    fn add_into(&mut self, v: Var, contrib: &[f64]) {
        self.accumulate(v, |slot| {
            slot.iter_mut().zip(contrib).for_each(|(s, c)| *s += c)
        });
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let mode = self.bcast_mode(a, b);
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate_binary(a, mode, true, g.to_vec());
                self.accumulate_binary(b, mode, false, g.iter().map(|v| sign * v).collect());
            }
            Op::Mul(a, b) => {
                let mode = self.bcast_mode(a, b);
                let (ea, eb) = self.expanded(a, b, mode, g.len());
                self.accumulate_binary(
                    a,
                    mode,
                    true,
                    g.iter().zip(&eb).map(|(g, y)| g * y).collect(),
                );
                self.accumulate_binary(
                    b,
                    mode,
                    false,
                    g.iter().zip(&ea).map(|(g, x)| g * x).collect(),
                );
            }
            Op::Div(a, b) => {
                let mode = self.bcast_mode(a, b);
                let (ea, eb) = self.expanded(a, b, mode, g.len());
                let ga = g.iter().zip(&eb).map(|(g, y)| g / y).collect();
                let gb = g
                    .iter()
                    .zip(ea.iter().zip(&eb))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.accumulate_binary(a, mode, true, ga);
                self.accumulate_binary(b, mode, false, gb);
            }
            Op::Maximum(a, b) => {
                let mode = self.bcast_mode(a, b);
                let (ea, eb) = self.expanded(a, b, mode, g.len());
                let pick_a: Vec<bool> = ea.iter().zip(&eb).map(|(x, y)| x >= y).collect();
                let ga = g
                    .iter()
                    .zip(&pick_a)
                    .map(|(g, &p)| if p { *g } else { 0.0 })
                    .collect();
                let gb = g
                    .iter()
                    .zip(&pick_a)
                    .map(|(g, &p)| if p { 0.0 } else { *g })
                    .collect();
                self.accumulate_binary(a, mode, true, ga);
                self.accumulate_binary(b, mode, false, gb);
            }
            Op::Scale(x, c) => {
                self.accumulate(x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g))
            }
            Op::Offset(x) | Op::Reshape(x) => self.add_into(x, g),
            Op::Relu(x) => {
                let contrib: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.add_into(x, &contrib);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                let contrib: Vec<f64> = y.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect();
                self.add_into(x, &contrib);
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.data();
                let contrib: Vec<f64> = y.iter().zip(g).map(|(y, g)| g * y).collect();
                self.add_into(x, &contrib);
            }
            Op::Ln(x) => {
                let contrib: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(v, g)| g / v)
                    .collect();
                self.add_into(x, &contrib);
            }
            Op::Clamp(x, lo, hi) => {
                let contrib: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| if (lo..=hi).contains(&v) { g } else { 0.0 })
                    .collect();
                self.add_into(x, &contrib);
            }
            Op::Transpose(x) => {
                let gt = Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g.to_vec());
                let back = gt.transpose().expect("rank checked in forward");
                self.add_into(x, back.data());
            }
            Op::Narrow { x, axis, start } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let in_shape = self.shape(x).to_vec();
                let (outer, ext, inner) = split_axis(&in_shape, axis);
                let len = out_shape[axis];
                self.accumulate(x, |slot| {
                    for o in 0..outer {
                        let dst =
                            &mut slot[(o * ext + start) * inner..(o * ext + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(p)[axis];
                    self.accumulate(p, |slot| {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut slot[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += len;
                }
            }
            Op::BroadcastRows(x) => {
                let p = self.value(x).numel();
                self.accumulate(x, |slot| {
                    for row in g.chunks(p) {
                        slot.iter_mut().zip(row).for_each(|(s, r)| *s += r);
                    }
                });
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let in_shape = self.shape(x).to_vec();
                let (outer, ext, inner) = split_axis(&in_shape, axis);
                let factor = if matches!(op, Op::Mean { .. }) {
                    1.0 / ext as f64
                } else {
                    1.0
                };
                self.accumulate(x, |slot| {
                    for o in 0..outer {
                        for a in 0..ext {
                            let dst = &mut slot[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                            let src = &g[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += factor * s);
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let g0 = g[0];
                self.accumulate(x, |slot| slot.iter_mut().for_each(|s| *s += g0));
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[i].value;
                let (outer, ext, inner) = split_axis(y.shape(), axis);
                let yd = y.data();
                let mut contrib = vec![0.0; yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |a: usize| (o * ext + a) * inner + j;
                        let dot: f64 = (0..ext).map(|a| g[idx(a)] * yd[idx(a)]).sum();
                        for a in 0..ext {
                            contrib[idx(a)] = yd[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                self.add_into(x, &contrib);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &self.nodes[i].value;
                let cols = *y.shape().last().unwrap();
                let yd = y.data();
                let mut contrib = vec![0.0; yd.len()];
                for (r, inv) in inv_std.iter().enumerate() {
                    let (ys, gs) = (&yd[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let mean_g = gs.iter().sum::<f64>() / cols as f64;
                    let mean_gy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        contrib[r * cols + c] = inv * (gs[c] - mean_g - ys[c] * mean_gy);
                    }
                }
                self.add_into(x, &contrib);
            }
            Op::MatMul(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let r = sa.len();
                let (m, k, p) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch = self.value(a).numel() / (m * k);
                if self.requires_grad(a) {
                    // dA = G · Bᵀ, accumulated row by row against a transposed copy of B.
                    let bt = transpose_batched(self.value(b).data(), batch, k, p);
                    self.accumulate(a, |slot| {
                        for bi in 0..batch {
                            matmul_acc(
                                &g[bi * m * p..(bi + 1) * m * p],
                                &bt[bi * k * p..(bi + 1) * k * p],
                                &mut slot[bi * m * k..(bi + 1) * m * k],
                                m,
                                p,
                                k,
                            );
                        }
                    });
                }
                if self.requires_grad(b) {
                    let ad = self.value(a).data().to_vec();
                    self.accumulate(b, |slot| {
                        for bi in 0..batch {
                            let gs = &g[bi * m * p..(bi + 1) * m * p];
                            let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                            let db = &mut slot[bi * k * p..(bi + 1) * k * p];
                            for row in 0..m {
                                let grow = &gs[row * p..(row + 1) * p];
                                for kk in 0..k {
                                    let av = as_[row * k + kk];
                                    if av == 0.0 {
                                        continue;
                                    }
                                    db[kk * p..(kk + 1) * p]
                                        .iter_mut()
                                        .zip(grow)
                                        .for_each(|(d, gv)| *d += av * gv);
                                }
                            }
                        }
                    });
                }
            }
        }
    }

    fn bcast_mode(&self, a: Var, b: Var) -> Bcast {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() {
            Bcast::Same
        } else if sa.numel() == 1 {
            Bcast::LeftScalar
        } else {
            Bcast::RightScalar
        }
    }

    /// Operand values expanded to the output length.
    fn expanded(&self, a: Var, b: Var, mode: Bcast, n: usize) -> (Vec<f64>, Vec<f64>) {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        match mode {
            Bcast::Same => (da.to_vec(), db.to_vec()),
            Bcast::LeftScalar => (vec![da[0]; n], db.to_vec()),
            Bcast::RightScalar => (da.to_vec(), vec![db[0]; n]),
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    matmul_acc(a, b, out, m, k, p);
}

const TILE_R: usize = 4;
const TILE_C: usize = 8;

/// `out += a · b` for row-major `a: [m, k]`, `b: [k, p]`. Works on 4×8
/// output tiles held in registers; edges fall back to plain loops.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    debug_assert!(a.len() == m * k && b.len() == k * p && out.len() == m * p);
    let full_c = p - p % TILE_C;
    let mut i = 0;
    while i + TILE_R <= m {
        for j in (0..full_c).step_by(TILE_C) {
            let mut acc = [[0.0f64; TILE_C]; TILE_R];
            for kk in 0..k {
                let bv: &[f64; TILE_C] = b[kk * p + j..kk * p + j + TILE_C].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + kk];
                    for (o, &x) in row.iter_mut().zip(bv) {
                        *o += av * x;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * p + j..(i + r) * p + j + TILE_C];
                o.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
        }
        if full_c < p {
            for r in i..i + TILE_R {
                row_acc(
                    &a[r * k..(r + 1) * k],
                    b,
                    &mut out[r * p + full_c..(r + 1) * p],
                    p,
                    full_c,
                );
            }
        }
        i += TILE_R;
    }
    for r in i..m {
        row_acc(
            &a[r * k..(r + 1) * k],
            b,
            &mut out[r * p..(r + 1) * p],
            p,
            0,
        );
    }
}

/// `orow += arow · b[:, from..]`.
fn row_acc(arow: &[f64], b: &[f64], orow: &mut [f64], p: usize, from: usize) {
    for (kk, &av) in arow.iter().enumerate() {
        let brow = &b[kk * p + from..(kk + 1) * p];
        orow.iter_mut().zip(brow).for_each(|(o, &x)| *o += av * x);
    }
}

/// Swaps the last two axes of `batch` row-major `[r, c]` matrices.
fn transpose_batched(x: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..batch {
        let (src, dst) = (
            &x[bi * r * c..(bi + 1) * r * c],
            &mut out[bi * r * c..(bi + 1) * r * c],
        );
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = g.constant(mat(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), g.value(b));

        let r = g.constant(mat(&[vec![1.0, 2.0]]));
        let col = g.constant(mat(&[vec![3.0], vec![4.0]]));
        let d = g.matmul(r, col).unwrap();
        assert_eq!(g.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn no_implicit_broadcasting() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![1, 3]));
        assert!(g.add(a, b).is_err());
        let s = g.constant(Tensor::scalar(2.0));
        let c = g.add(a, s).unwrap();
        assert_eq!(g.value(c).data(), &[2.0; 6]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);
    }

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64));
        let loss = g.sum_all(w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), Tensor::ones(vec![2, 3]));
    }

    #[test]
    fn square_has_gradient_two_w() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_fn(vec![4], |i| i as f64 - 1.5));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        let expect = g.value(w).map(|v| 2.0 * v);
        assert_eq!(g.grad(w).unwrap(), expect);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(vec![3]));
        let w = g.leaf(Tensor::ones(vec![3]));
        let p = g.mul(c, w).unwrap();
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(w).is_some());
    }

    #[test]
    fn depends_on_follows_parent_links() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::ones(vec![2]));
        let b = g.leaf(Tensor::ones(vec![2]));
        let c = g.relu(a);
        let d = g.add(c, c).unwrap();
        assert!(g.depends_on(d, a));
        assert!(!g.depends_on(d, b));
        assert_eq!(g.parents(d), vec![c, c]);
        assert_eq!(g.op_name(d), "add");
    }
}
