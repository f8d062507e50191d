//! Reverse-mode autodiff tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Node ids are assigned in recording order, so
//! inputs always precede outputs and a single reverse sweep visits each node
//! once. Parameters are recorded by reference: binding a large embedding table
//! costs nothing until a gradient is requested.

use std::borrow::Cow;
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numerics::ops::{self, check_indices, check_rate, dropout_mask};
use crate::numerics::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attribution bucket for the op counters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OpClass {
    #[default]
    Dense,
    /// Score and mixing products of dot-product attention.
    Attention,
    /// Pair-table retrieval and pooling.
    Pair,
}

/// Work performed while recording, independent of wall time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub dense_flops: u64,
    pub attention_flops: u64,
    pub pair_flops: u64,
    pub embedding_lookups: u64,
    pub pair_lookups: u64,
}

impl OpCounters {
    pub fn total_flops(&self) -> u64 {
        self.dense_flops + self.attention_flops + self.pair_flops
    }

    fn add_flops(&mut self, class: OpClass, n: u64) {
        match class {
            OpClass::Dense => self.dense_flops += n,
            OpClass::Attention => self.attention_flops += n,
            OpClass::Pair => self.pair_flops += n,
        }
    }

    fn add_lookups(&mut self, class: OpClass, n: u64) {
        match class {
            OpClass::Pair => self.pair_lookups += n,
            _ => self.embedding_lookups += n,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, Scalar),
    Sum(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    Dropout(NodeId, Vec<Scalar>),
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    PairPool {
        table: NodeId,
        slots: Vec<usize>,
        group: usize,
    },
    SumGroups {
        x: NodeId,
        group: usize,
    },
    Reshape(NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<Scalar>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Tensor,
        count: usize,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread; drop it to release all
/// intermediate values.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    class: OpClass,
    counters: OpCounters,
}

/// Gradients from one reverse sweep, indexed by node.
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

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
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

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    /// Sets the counter bucket for subsequent ops and returns the previous one.
    pub fn set_class(&mut self, class: OpClass) -> OpClass {
        std::mem::replace(&mut self.class, class)
    }

    fn push(&mut self, op_name: &'static str, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn flops(&mut self, n: usize) {
        let class = self.class;
        self.counters.add_flops(class, n as u64);
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("constant", Cow::Owned(value), Op::Leaf, false)
    }

    /// Trainable leaf recorded by reference.
    pub fn param(&mut self, value: &'a Tensor) -> Result<NodeId> {
        self.push("param", Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Trainable leaf that the tape owns.
    pub fn param_owned(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("param", Cow::Owned(value), Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        self.flops(2 * m * k * out.cols());
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Cow::Owned(out), Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        self.flops(2 * m * k * out.cols());
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul_nt", Cow::Owned(out), Op::MatMulNt(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.flops(out.len());
        let rg = self.rg(a) || self.rg(b);
        self.push("add", Cow::Owned(out), Op::Add(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.flops(out.len());
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", Cow::Owned(out), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: Scalar) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.flops(out.len());
        let rg = self.rg(a);
        self.push("scale", Cow::Owned(out), Op::Scale(a, factor), rg)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(a).sum());
        self.flops(self.value(a).len());
        let rg = self.rg(a);
        self.push("sum", Cow::Owned(out), Op::Sum(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = ops::gelu(self.value(a));
        self.flops(out.len());
        let rg = self.rg(a);
        self.push("gelu", Cow::Owned(out), Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let out = ops::softmax_rows(self.value(a))?;
        self.flops(3 * out.len());
        let rg = self.rg(a);
        self.push("softmax_rows", Cow::Owned(out), Op::Softmax(a), rg)
    }

    /// Inverted dropout. `rng = None` means evaluation mode, which, like a
    /// zero rate, returns `a` unchanged without recording a node.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: Option<&mut Rng>) -> Result<NodeId> {
        check_rate(rate)?;
        let Some(rng) = rng else { return Ok(a) };
        if rate == 0.0 {
            return Ok(a);
        }
        let va = self.value(a);
        let mask = dropout_mask(va.len(), rate, rng);
        let data = va.data().iter().zip(&mask).map(|(v, k)| v * k).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.flops(out.len());
        let rg = self.rg(a);
        self.push("dropout", Cow::Owned(out), Op::Dropout(a, mask), rg)
    }

    /// Row gather; the backward pass scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let out = ops::gather_rows(self.value(table), &indices)?;
        let class = self.class;
        self.counters.add_lookups(class, indices.len() as u64);
        let rg = self.rg(table);
        self.push("gather_rows", Cow::Owned(out), Op::Gather { table, indices }, rg)
    }

    /// Output row `r` is the sum of the `group` table rows
    /// `slots[r*group .. (r+1)*group]`, read from the table and accumulated
    /// into a fresh contiguous buffer.
    pub fn pair_pool(&mut self, table: NodeId, slots: Vec<usize>, group: usize) -> Result<NodeId> {
        let tv = self.value(table);
        let (k, d) = tv.dims2("pair_pool")?;
        if group == 0 || !slots.len().is_multiple_of(group) {
            return Err(Error::dim("pair_pool", &[slots.len()], &[group]));
        }
        check_indices("pair_pool", &slots, k)?;
        let rows = slots.len() / group;
        let mut out = vec![0.0; rows * d];
        let table_data = tv.data();
        for (r, chunk) in slots.chunks_exact(group).enumerate() {
            let acc = &mut out[r * d..(r + 1) * d];
            for &s in chunk {
                let src = &table_data[s * d..(s + 1) * d];
                for (o, &v) in acc.iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let class = self.class;
        self.counters.add_lookups(class, slots.len() as u64);
        self.flops(slots.len() * d);
        let rg = self.rg(table);
        let out = Tensor::from_parts(vec![rows, d], out);
        self.push("pair_pool", Cow::Owned(out), Op::PairPool { table, slots, group }, rg)
    }

    /// Sums consecutive blocks of `group` rows.
    pub fn sum_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, d) = xv.dims2("sum_groups")?;
        if group == 0 || n % group != 0 {
            return Err(Error::dim("sum_groups", xv.shape(), &[group]));
        }
        let rows = n / group;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let acc = &mut out[r * d..(r + 1) * d];
            for t in 0..group {
                for (o, &v) in acc.iter_mut().zip(xv.row(r * group + t)) {
                    *o += v;
                }
            }
        }
        self.flops(n * d);
        let rg = self.rg(x);
        let out = Tensor::from_parts(vec![rows, d], out);
        self.push("sum_groups", Cow::Owned(out), Op::SumGroups { x, group }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", Cow::Owned(out), Op::Reshape(x), rg)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, d) = xv.dims2("slice_rows")?;
        if start + len > n {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                bound: n,
            });
        }
        let out = Tensor::from_parts(vec![len, d], xv.data()[start * d..(start + len) * d].to_vec());
        let rg = self.rg(x);
        self.push("slice_rows", Cow::Owned(out), Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, d) = xv.dims2("slice_cols")?;
        if start + width > d {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + width,
                bound: d,
            });
        }
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(&xv.row(i)[start..start + width]);
        }
        let out = Tensor::from_parts(vec![n, width], data);
        let rg = self.rg(x);
        self.push("slice_cols", Cow::Owned(out), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let n = self.value(first).rows();
        let mut width = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != n {
                return Err(Error::dim("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            width += c;
        }
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::from_parts(vec![n, width], data);
        self.push("concat_cols", Cow::Owned(out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let d = self.value(first).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != d {
                return Err(Error::dim("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            data.extend_from_slice(self.value(p).data());
            n += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::from_parts(vec![n, d], data);
        self.push("concat_rows", Cow::Owned(out), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row-wise layer normalization with gain `gamma` and shift `beta` (both `[d]`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: Scalar) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, d) = xv.dims2("layer_norm")?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != d || b.len() != d {
            return Err(Error::dim("layer_norm", xv.shape(), g.shape()));
        }
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<Scalar>() / d as Scalar;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / d as Scalar;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        self.flops(8 * n * d);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = Tensor::from_parts(vec![n, d], out);
        let xhat = Tensor::from_parts(vec![n, d], xhat);
        self.push(
            "layer_norm",
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean cross-entropy over rows not in `ignore`; zero (with zero gradient)
    /// when every row is ignored.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Vec<usize>, ignore: &HashSet<usize>) -> Result<NodeId> {
        let (loss, probs, count) = ops::cross_entropy_parts(self.value(logits), &targets, ignore)?;
        let active = (0..targets.len()).map(|i| !ignore.contains(&i)).collect();
        self.flops(4 * probs.len());
        let rg = self.rg(logits);
        self.push(
            "cross_entropy_rows",
            Cow::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits,
                targets,
                active,
                probs,
                count,
            },
            rg,
        )
    }

    /// One reverse sweep from a scalar `loss`. Gradients are retained for
    /// leaves only.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if let Some(t) = g {
                if !t.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, ops::matmul_nt(g, self.value(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, ops::matmul_tn(self.value(*a), g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, ops::matmul(g, self.value(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, ops::matmul_tn(g, self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_map(g, vb, |x, y| x * y));
                self.accumulate(grads, *b, zip_map(g, va, |x, y| x * y));
            }
            Op::Scale(a, factor) => {
                let data = g.data().iter().map(|v| v * factor).collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Gelu(a) => {
                let grad = zip_map(g, self.value(*a), |gv, x| gv * ops::gelu_derivative(x));
                self.accumulate(grads, *a, grad);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (m, n) = y.dims2("softmax_rows")?;
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: Scalar = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![m, n], out));
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(v, k)| v * k).collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Gather { table, indices } => {
                let mut out = Tensor::zeros(self.value(*table).shape());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &v) in out.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, out);
            }
            Op::PairPool { table, slots, group } => {
                let mut out = Tensor::zeros(self.value(*table).shape());
                for (r, chunk) in slots.chunks_exact(*group).enumerate() {
                    let gr = g.row(r);
                    for &s in chunk {
                        for (o, &v) in out.row_mut(s).iter_mut().zip(gr) {
                            *o += v;
                        }
                    }
                }
                self.accumulate(grads, *table, out);
            }
            Op::SumGroups { x, group } => {
                let shape = self.value(*x).shape().to_vec();
                let d = shape[1];
                let mut out = Vec::with_capacity(shape[0] * d);
                for r in 0..g.rows() {
                    for _ in 0..*group {
                        out.extend_from_slice(g.row(r));
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, out));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape)?);
            }
            Op::SliceRows { x, start } => {
                let mut out = Tensor::zeros(self.value(*x).shape());
                let d = out.cols();
                out.data_mut()[start * d..start * d + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, out);
            }
            Op::SliceCols { x, start } => {
                let mut out = Tensor::zeros(self.value(*x).shape());
                let w = g.cols();
                for i in 0..g.rows() {
                    out.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(g.rows() * w);
                    for i in 0..g.rows() {
                        data.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    offset += w;
                    self.accumulate(grads, p, Tensor::from_parts(vec![g.rows(), w], data));
                }
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    let data = g.data()[offset * d..(offset + n) * d].to_vec();
                    offset += n;
                    self.accumulate(grads, p, Tensor::from_parts(vec![n, d], data));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.dims2("layer_norm")?;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    let (gr, hr) = (g.row(i), xhat.row(i));
                    let mut sum_gh = 0.0;
                    let mut sum_gh_h = 0.0;
                    for j in 0..d {
                        dbeta[j] += gr[j];
                        dgamma[j] += gr[j] * hr[j];
                        let gh = gr[j] * gv[j];
                        sum_gh += gh;
                        sum_gh_h += gh * hr[j];
                    }
                    let scale = inv_std[i] / d as Scalar;
                    for j in 0..d {
                        let gh = gr[j] * gv[j];
                        dx[i * d + j] = scale * (d as Scalar * gh - sum_gh - hr[j] * sum_gh_h);
                    }
                }
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, d], dx));
                self.accumulate(grads, *gamma, Tensor::from_parts(gshape, dgamma));
                self.accumulate(grads, *beta, Tensor::from_parts(bshape, dbeta));
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
                probs,
                count,
            } => {
                let mut out = Tensor::zeros(probs.shape());
                if *count > 0 {
                    let scale = g.item() / *count as Scalar;
                    for (i, (&t, &on)) in targets.iter().zip(active).enumerate() {
                        if !on {
                            continue;
                        }
                        let row = out.row_mut(i);
                        row.copy_from_slice(probs.row(i));
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
                self.accumulate(grads, *logits, out);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(Scalar, Scalar) -> Scalar) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}
