//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Graph`] is rebuilt for every example: forward operations append nodes
//! in evaluation order, so the node vector is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Leaves may borrow their
//! values (model parameters are never copied onto the tape).
//!
//! Broadcasting is limited to equal shapes and single-element operands.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Binary(Binary, NodeId, NodeId),
    Unary(Unary, NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    RepeatRows(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Pick(NodeId, usize),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The computation tape.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to the grad-enabled leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op} produced a non-finite value")))
    }
}

fn softmax_rows(input: &[f64], cols: usize, out: &mut [f64]) {
    for (src, dst) in input.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
}

fn log_softmax_rows(input: &[f64], cols: usize, out: &mut [f64]) {
    for (src, dst) in input.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_total = src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln() + max;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - log_total;
        }
    }
}

/// Numerically stable softmax over the last axis of `logits`.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.last_dim() == 0 {
        return Err(Error::Contract("softmax over an empty axis".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_rows(logits.data(), logits.last_dim(), &mut out);
    Tensor::new(logits.shape(), out)
}

/// Numerically stable log-softmax over the last axis of `logits`.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.last_dim() == 0 {
        return Err(Error::Contract("log_softmax over an empty axis".into()));
    }
    let mut out = vec![0.0; logits.len()];
    log_softmax_rows(logits.data(), logits.last_dim(), &mut out);
    Tensor::new(logits.shape(), out)
}

/// `a[m x k] . b[k x n]`, row-major.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that owns its value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that borrows its value for the lifetime of the graph.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), m, k, n, &mut out);
        check_finite("matmul", &out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.len() == 1 {
            ta.shape().to_vec()
        } else if ta.len() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::Dimension {
                op: "elementwise",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (pick(da, i), pick(db, i));
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        check_finite("elementwise", &out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if kind == Unary::Log {
            if let Some(bad) = ta.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive argument {bad}"),
                });
            }
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Tanh => v.tanh(),
                Unary::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
            })
            .collect();
        check_finite("unary", &out)?;
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Unary(kind, a), rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, a)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|v| v * factor).collect();
        check_finite("scale", &out)?;
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Scale(a, factor), rg))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let out = softmax(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let out = log_softmax(self.value(a))?;
        check_finite("log_softmax", out.data())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Embedding lookup: row `i` of the result is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, cols) = t.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index { id, len: rows });
            }
            out.extend_from_slice(t.row_slice(id));
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(&[ids.len(), cols], out)?,
            Op::GatherRows(table, ids.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(&[rows, cols], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a);
        let (rows, cols) = t.dims2()?;
        if start >= end || end > cols {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(&[rows, end - start], out)?,
            Op::SliceCols(a, start, end),
            rg,
        ))
    }

    /// Tiles a `[1 x c]` row `n` times into `[n x c]`.
    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let t = self.value(a);
        let (rows, cols) = t.dims2()?;
        if rows != 1 {
            return Err(Error::Dimension {
                op: "repeat_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![1, cols],
            });
        }
        let out = t.data().repeat(n);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&[n, cols], out)?, Op::RepeatRows(a), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).data().iter().sum::<f64>();
        check_finite("sum", &[total])?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(a), rg))
    }

    /// Single element at flat `index`, as a scalar.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let t = self.value(a);
        if index >= t.len() {
            return Err(Error::Index {
                id: index,
                len: t.len(),
            });
        }
        let v = t.data()[index];
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, index), rg))
    }

    /// Gradients of the scalar `loss` with respect to every grad-enabled
    /// leaf. The graph is not consumed; repeated calls return identical
    /// gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(idx, g)| {
                let node = &self.nodes[idx];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape(), g).expect("gradient shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<'a>, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = ta.dims2().expect("rank 2");
                let n = tb.dims2().expect("rank 2").1;
                let (da, db) = (ta.data(), tb.data());
                self.accumulate(grads, a, |g| {
                    for i in 0..m {
                        let up_row = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let b_row = &db[p * n..(p + 1) * n];
                            g[i * k + p] += up_row.iter().zip(b_row).map(|(u, v)| u * v).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, b, |g| {
                    for i in 0..m {
                        let up_row = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = da[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (gv, &u) in g[p * n..(p + 1) * n].iter_mut().zip(up_row) {
                                *gv += av * u;
                            }
                        }
                    }
                });
            }
            &Op::Binary(kind, a, b) => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let scatter = |g: &mut [f64], i: usize, v: f64| {
                    if g.len() == 1 {
                        g[0] += v;
                    } else {
                        g[i] += v;
                    }
                };
                self.accumulate(grads, a, |g| {
                    for (i, &u) in up.iter().enumerate() {
                        let v = match kind {
                            Binary::Add | Binary::Sub => u,
                            Binary::Mul => u * at(db, i),
                        };
                        scatter(g, i, v);
                    }
                });
                self.accumulate(grads, b, |g| {
                    for (i, &u) in up.iter().enumerate() {
                        let v = match kind {
                            Binary::Add => u,
                            Binary::Sub => -u,
                            Binary::Mul => u * at(da, i),
                        };
                        scatter(g, i, v);
                    }
                });
            }
            &Op::Unary(kind, a) => {
                let input = self.value(a).data();
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        let y = out[i];
                        g[i] += up[i]
                            * match kind {
                                Unary::Tanh => 1.0 - y * y,
                                Unary::Sigmoid => y * (1.0 - y),
                                Unary::Exp => y,
                                Unary::Log => 1.0 / input[i],
                            };
                    }
                });
            }
            &Op::Scale(a, factor) => {
                self.accumulate(grads, a, |g| {
                    for (gv, &u) in g.iter_mut().zip(up) {
                        *gv += u * factor;
                    }
                });
            }
            &Op::Softmax(a) => {
                let cols = node.value.last_dim();
                self.accumulate(grads, a, |g| {
                    for ((g_row, y_row), u_row) in g.chunks_mut(cols).zip(out.chunks(cols)).zip(up.chunks(cols)) {
                        let dot: f64 = y_row.iter().zip(u_row).map(|(y, u)| y * u).sum();
                        for ((gv, &y), &u) in g_row.iter_mut().zip(y_row).zip(u_row) {
                            *gv += y * (u - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let cols = node.value.last_dim();
                self.accumulate(grads, a, |g| {
                    for ((g_row, y_row), u_row) in g.chunks_mut(cols).zip(out.chunks(cols)).zip(up.chunks(cols)) {
                        let total: f64 = u_row.iter().sum();
                        for ((gv, &y), &u) in g_row.iter_mut().zip(y_row).zip(u_row) {
                            *gv += u - y.exp() * total;
                        }
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let cols = self.value(*table).last_dim();
                self.accumulate(grads, *table, |g| {
                    for (i, &id) in ids.iter().enumerate() {
                        for (gv, &u) in g[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(&up[i * cols..(i + 1) * cols])
                        {
                            *gv += u;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.accumulate(grads, p, |g| {
                        for r in 0..rows {
                            for c in 0..w {
                                g[r * w + c] += up[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |g| {
                        for (gv, &u) in g.iter_mut().zip(&up[offset..offset + n]) {
                            *gv += u;
                        }
                    });
                    offset += n;
                }
            }
            &Op::SliceCols(a, start, end) => {
                let cols = self.value(a).last_dim();
                let w = end - start;
                self.accumulate(grads, a, |g| {
                    for (r, u_row) in up.chunks(w).enumerate() {
                        for (gv, &u) in g[r * cols + start..r * cols + end].iter_mut().zip(u_row) {
                            *gv += u;
                        }
                    }
                });
            }
            &Op::RepeatRows(a) => {
                let cols = self.value(a).len();
                self.accumulate(grads, a, |g| {
                    for u_row in up.chunks(cols) {
                        for (gv, &u) in g.iter_mut().zip(u_row) {
                            *gv += u;
                        }
                    }
                });
            }
            &Op::Reshape(a) => {
                self.accumulate(grads, a, |g| {
                    for (gv, &u) in g.iter_mut().zip(up) {
                        *gv += u;
                    }
                });
            }
            &Op::Sum(a) => {
                self.accumulate(grads, a, |g| {
                    for gv in g.iter_mut() {
                        *gv += up[0];
                    }
                });
            }
            &Op::Pick(a, index) => {
                self.accumulate(grads, a, |g| g[index] += up[0]);
            }
        }
    }
}
