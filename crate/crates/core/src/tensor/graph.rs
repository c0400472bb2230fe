use std::collections::HashMap;

use super::ops::{self, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    SegmentMax {
        x: NodeId,
        argmax: Vec<usize>,
    },
    SegmentMean {
        x: NodeId,
        segments: Vec<Vec<usize>>,
    },
    ScaleRows {
        x: NodeId,
        s: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    /// Accumulated gradient, kept only for leaves that require grad.
    grad: Option<Vec<f64>>,
}

/// A single-use computation tape. Nodes are appended in execution order, so
/// index order is a topological order and backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf that requires grad.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Every softmax node on the tape with its normalized axis.
    pub fn softmax_nodes(&self) -> Vec<(NodeId, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Softmax { axis, .. } => Some((NodeId(i), axis)),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A free leaf that receives gradients (used by tests and grad checks).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        let n = value.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
            grad: Some(vec![0.0; n]),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf holding a copy of a stored parameter. Repeated calls return the
    /// same node so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.variable(store.value(id).clone());
        self.nodes[node.0].param = Some(id);
        self.params.insert(id, node);
        node
    }

    /// Adds every parameter leaf's accumulated gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&pid, &node) in &self.params {
            if let Some(g) = &self.nodes[node.0].grad {
                store.accumulate_grad(pid, g);
            }
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Checks that `b` equals `a` or a trailing suffix of it (leading-dimension
    /// expansion of `b`).
    fn broadcast_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb && !sb.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.broadcast_check(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    /// Elementwise sum; `b` may be broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product; `b` may be broadcast over leading dimensions of `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same length");
        self.push(t, Op::Scale(x, c), &[x])
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same length");
        self.push(t, op, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, ops::sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |a| if a > 0.0 { a } else { 0.0 }, Op::Relu(x))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(Error::shape("transpose", v.shape(), &[]));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let src = v.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(x);
        let c = v.cols();
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", v.shape(), &[start, end]));
        }
        let w = end - start;
        let rows = v.rows();
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&v.row(r)[start..end]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().expect("ndim >= 1") = w;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    /// Concatenation along the last axis; leading dimensions must agree.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_cols", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks 2-D nodes with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.ndim() != 2 || v.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(first), v.shape()));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows of a 2-D table; backward scatter-adds into the table.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = self.value(table);
        if v.ndim() != 2 {
            return Err(Error::shape("gather_rows", v.shape(), &[]));
        }
        let rows = v.rows();
        let cols = v.cols();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::Index { index: i, rows });
            }
            out.extend_from_slice(v.row(i));
        }
        let t = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Column-wise maximum over each segment of rows. Output row `s` is the
    /// max over rows `segments[s]`; ties go to the first listed row.
    pub fn segment_max(&mut self, x: NodeId, segments: &[Vec<usize>]) -> Result<NodeId> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(Error::shape("segment_max", v.shape(), &[]));
        }
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(segments.len() * cols);
        let mut argmax = Vec::with_capacity(segments.len() * cols);
        for seg in segments {
            let (&first, rest) = seg.split_first().ok_or(Error::EmptyPool)?;
            if let Some(&bad) = seg.iter().find(|&&r| r >= rows) {
                return Err(Error::Index { index: bad, rows });
            }
            for j in 0..cols {
                let mut best = first;
                let mut best_v = v.data()[first * cols + j];
                for &r in rest {
                    let val = v.data()[r * cols + j];
                    if val > best_v {
                        best_v = val;
                        best = r;
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
        let t = Tensor::new(vec![segments.len(), cols], out)?;
        Ok(self.push(t, Op::SegmentMax { x, argmax }, &[x]))
    }

    /// Masked max-pooling of `x[t,d]` to `[d]`.
    pub fn max_pool(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != mask.len() {
            return Err(Error::shape("max_pool", &s, &[mask.len()]));
        }
        let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyPool);
        }
        let pooled = self.segment_max(x, &[rows])?;
        self.reshape(pooled, vec![s[1]])
    }

    /// Column-wise mean over each segment of rows.
    pub fn segment_mean(&mut self, x: NodeId, segments: &[Vec<usize>]) -> Result<NodeId> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(Error::shape("segment_mean", v.shape(), &[]));
        }
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; segments.len() * cols];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::EmptyPool);
            }
            let dst = &mut out[s * cols..(s + 1) * cols];
            for &r in seg {
                if r >= rows {
                    return Err(Error::Index { index: r, rows });
                }
                for (d, &val) in dst.iter_mut().zip(v.row(r)) {
                    *d += val;
                }
            }
            let inv = 1.0 / seg.len() as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let t = Tensor::new(vec![segments.len(), cols], out)?;
        Ok(self.push(
            t,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            &[x],
        ))
    }

    /// Multiplies row `i` of `x[n,d]` by the scalar `s[i]` (`s` is `[n,1]` or `[n]`).
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (xv, sv) = (self.value(x), self.value(s));
        if xv.ndim() != 2 || sv.len() != xv.rows() || sv.len() != sv.shape()[0] {
            return Err(Error::shape("scale_rows", xv.shape(), sv.shape()));
        }
        let cols = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a * sv.data()[i / cols])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::ScaleRows { x, s }, &[x, s]))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x);
        if axis >= v.ndim() || v.shape()[axis] == 0 {
            return Err(Error::shape("softmax", v.shape(), &[axis]));
        }
        let data = ops::softmax_axis(v.data(), v.shape(), axis);
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits[b,Y]`. Returns a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        if v.ndim() != 2 || v.rows() != labels.len() || labels.is_empty() {
            return Err(Error::shape("cross_entropy", v.shape(), &[labels.len()]));
        }
        let ncls = v.cols();
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(v.len());
        for (i, &y) in labels.iter().enumerate() {
            if y >= ncls {
                return Err(Error::Index {
                    index: y,
                    rows: ncls,
                });
            }
            let row = v.row(i);
            let lse = ops::log_sum_exp(row);
            total += lse - row[y];
            probs.extend(row.iter().map(|z| (z - lse).exp()));
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar root. Intermediate gradients are fresh per
    /// call; leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(acc) = &mut self.nodes[idx].grad {
                    acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d);
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        // Returns the gradient buffer for `id`, or None if it needs no grad.
        macro_rules! buf {
            ($id:expr) => {{
                let id: NodeId = $id;
                if nodes[id.0].requires_grad {
                    let n = nodes[id.0].value.len();
                    Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = buf!(*a) {
                    matmul_bt_acc(g, nodes[b.0].value.data(), ga, m, k, n);
                }
                if let Some(gb) = buf!(*b) {
                    matmul_at_acc(nodes[a.0].value.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = buf!(*b) {
                    let nb = gb.len();
                    for (i, d) in g.iter().enumerate() {
                        gb[i % nb] += d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let nb = bv.len();
                if let Some(ga) = buf!(*a) {
                    for (i, d) in g.iter().enumerate() {
                        ga[i] += d * bv[i % nb];
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for (i, d) in g.iter().enumerate() {
                        gb[i % nb] += d * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, d)| *a += d * c);
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((a, d), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *a += d * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((a, d), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *a += d * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = buf!(*x) {
                    for ((a, d), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *a += d;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = buf!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, d)| *a += d);
                }
            }
            Op::SliceCols { x, start } => {
                let in_cols = nodes[x.0].value.cols();
                let w = out.cols();
                if let Some(gx) = buf!(*x) {
                    for r in 0..out.rows() {
                        let dst = &mut gx[r * in_cols + start..r * in_cols + start + w];
                        for (a, d) in dst.iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *a += d;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if let Some(gp) = buf!(*p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (a, d) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *a += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(gp) = buf!(*p) {
                        for (a, d) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *a += d;
                        }
                    }
                    offset += n;
                }
            }
            Op::GatherRows { table, ids } => {
                let cols = out.cols();
                if let Some(gt) = buf!(*table) {
                    for (r, &i) in ids.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        for (a, d) in gt[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                            *a += d;
                        }
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                let cols = out.cols();
                if let Some(gx) = buf!(*x) {
                    for (k, (&row, d)) in argmax.iter().zip(g).enumerate() {
                        gx[row * cols + k % cols] += d;
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                let cols = out.cols();
                if let Some(gx) = buf!(*x) {
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len() as f64;
                        let src = &g[s * cols..(s + 1) * cols];
                        for &r in seg {
                            for (a, d) in gx[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                                *a += d * inv;
                            }
                        }
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let cols = out.cols();
                let xv = nodes[x.0].value.data();
                let sv = nodes[s.0].value.data();
                if let Some(gx) = buf!(*x) {
                    for (i, d) in g.iter().enumerate() {
                        gx[i] += d * sv[i / cols];
                    }
                }
                if let Some(gs) = buf!(*s) {
                    for (i, d) in g.iter().enumerate() {
                        gs[i / cols] += d * xv[i];
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = out.data();
                let (outer, n, inner) = ops::axis_layout(out.shape(), *axis);
                if let Some(gx) = buf!(*x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |t: usize| o * n * inner + t * inner + j;
                            let dot: f64 = (0..n).map(|t| y[at(t)] * g[at(t)]).sum();
                            for t in 0..n {
                                gx[at(t)] += y[at(t)] * (g[at(t)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let ncls = nodes[logits.0].value.cols();
                let scale = g[0] / labels.len() as f64;
                if let Some(gl) = buf!(*logits) {
                    for (i, &y) in labels.iter().enumerate() {
                        for c in 0..ncls {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            gl[i * ncls + c] += scale * (probs[i * ncls + c] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }
}
