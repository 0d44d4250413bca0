//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node, so node ids are already a
//! topological order. `backward` walks the ids in exact reverse order.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(T),
    AddBias,
    Log,
    Exp,
    Relu,
    Sum { axis: usize },
    Mean { axis: usize },
    SumAll,
    Max { argmax: Vec<usize> },
    Concat { axis: usize, sizes: Vec<usize> },
    Transpose,
    Reshape,
    Embedding { indices: Vec<usize> },
    Softmax { axis: usize },
    MaskedSoftmax,
    LogSoftmax,
    LayerNorm { mean: Vec<T>, rstd: Vec<T> },
    SliceRows { start: usize },
    SliceCols { start: usize },
    Pick { indices: Vec<usize> },
    XLogXSum,
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    needs_grad: bool,
    name: Option<String>,
    leaf_grad: Option<Vec<T>>,
}

/// A single-threaded tape of tensor ops over one scalar precision.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// `(outer, len, inner)` strides for reducing `shape` along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

pub(crate) fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
            name: None,
            leaf_grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a leaf; gradient tracking follows `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> NodeId {
        let needs_grad = tensor.requires_grad();
        tensor.zero_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: tensor,
            needs_grad,
            name: None,
            leaf_grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> NodeId {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Registers a named leaf; `trainable` controls gradient tracking.
    pub fn param(&mut self, name: &str, tensor: &Tensor<T>, trainable: bool) -> NodeId {
        let id = self.leaf(tensor.clone().with_requires_grad(trainable));
        self.nodes[id.0].name = Some(name.to_string());
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].leaf_grad.as_deref()
    }

    /// Gradients of all named trainable leaves, in registration order.
    pub fn named_grads(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.nodes.iter().filter_map(|n| match (&n.name, &n.leaf_grad) {
            (Some(name), Some(g)) => Some((name.as_str(), g.as_slice())),
            _ => None,
        })
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.leaf_grad = None;
        }
    }

    fn check_finite(&self, op: &'static str, t: &Tensor<T>) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(Error::Evaluation(format!("{op} produced a non-finite value")))
        }
    }

    // ----- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2()?;
        let (k2, n) = vb.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        }
        let out = matmul_kernel(va.data(), vb.data(), m, k, n);
        Ok(self.push(Op::MatMul, vec![a, b], Tensor::raw(vec![m, n], out)))
    }

    fn binary(&mut self, op: Op<T>, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::raw(va.shape().to_vec(), data);
        Ok(self.push(op, vec![a, b], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op<T>, a: NodeId, f: impl Fn(T) -> T) -> NodeId {
        let va = self.value(a);
        let out = Tensor::raw(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect());
        self.push(op, vec![a], out)
    }

    /// Scalar-times-tensor, the only broadcast the graph supports.
    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        self.unary(Op::Scale(s), a, |x| x * s)
    }

    /// `x[i, :] + b` for every row of a matrix.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        let (m, n) = vx.dims2()?;
        if vb.shape() != [n] {
            return Err(Error::dim("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for r in 0..m {
            add_into(&mut data[r * n..(r + 1) * n], vb.data());
        }
        Ok(self.push(Op::AddBias, vec![x, b], Tensor::raw(vec![m, n], data)))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
        Ok(self.unary(Op::Log, a, T::ln))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let id = self.unary(Op::Exp, a, T::exp);
        self.check_finite("exp", self.value(id))?;
        Ok(id)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu, a, |x| if x > T::zero() { x } else { T::zero() })
    }

    fn reduce(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(Error::dim("reduce", va.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(va.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = va.data();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &d[base..base + inner]);
            }
        }
        if mean {
            let inv = T::one() / T::of(len as f64);
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        let op = if mean { Op::Mean { axis } } else { Op::Sum { axis } };
        Ok(self.push(op, vec![a], Tensor::raw(shape, out)))
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(Error::dim("max", va.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(va.shape(), axis);
        let d = va.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for k in 1..len {
                    let idx = (o * len + k) * inner + i;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Op::Max { argmax }, vec![a], Tensor::raw(shape, out)))
    }

    pub fn sum(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(a, axis, true)
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Op::SumAll, vec![a], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let base_shape = self.value(*first).shape().to_vec();
        if axis >= base_shape.len() {
            return Err(Error::dim("concat", &base_shape, &[axis]));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &base_shape, s));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut shape = base_shape.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&sizes) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(self.push(Op::Concat { axis, sizes }, parts.to_vec(), Tensor::raw(shape, out)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2()?;
        let d = va.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose, vec![a], Tensor::raw(vec![n, m], out)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![a], out))
    }

    /// Gathers rows of `table` (V x E) for each index.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let (v, e) = vt.dims2()?;
        if indices.is_empty() {
            return Err(Error::Input("embedding lookup with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("token id {bad} out of range for vocabulary {v}")));
        }
        let mut out = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            out.extend_from_slice(vt.row(i));
        }
        let op = Op::Embedding {
            indices: indices.to_vec(),
        };
        Ok(self.push(op, vec![table], Tensor::raw(vec![indices.len(), e], out)))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(Error::dim("softmax", va.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(va.shape(), axis);
        let d = va.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| d[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (d[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    z = z + e;
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / z;
                }
            }
        }
        let shape = va.shape().to_vec();
        Ok(self.push(Op::Softmax { axis }, vec![a], Tensor::raw(shape, out)))
    }

    /// Softmax over the last axis of a matrix, restricted to entries where
    /// `keep` is true. Excluded entries get probability exactly zero.
    pub fn masked_softmax(&mut self, a: NodeId, keep: &[bool]) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2()?;
        if keep.len() != m * n {
            return Err(Error::dim("masked_softmax", va.shape(), &[keep.len()]));
        }
        let d = va.data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = r * n..(r + 1) * n;
            if !keep[row.clone()].iter().any(|&k| k) {
                return Err(Error::Contract(format!("masked_softmax row {r} is fully masked")));
            }
            let kept = || d[row.clone()].iter().zip(&keep[row.clone()]).filter(|(_, &k)| k).map(|(&x, _)| x);
            if kept().any(|x| x.is_nan()) {
                return Err(Error::Evaluation(format!("masked_softmax row {r} holds NaN")));
            }
            let mx = kept().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in row.clone() {
                if keep[j] {
                    out[j] = (d[j] - mx).exp();
                    z = z + out[j];
                }
            }
            out[row].iter_mut().for_each(|v| *v = *v / z);
        }
        Ok(self.push(Op::MaskedSoftmax, vec![a], Tensor::raw(vec![m, n], out)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let n = *va
            .shape()
            .last()
            .ok_or_else(|| Error::Input("log_softmax of a scalar".into()))?;
        let d = va.data();
        let mut out = vec![T::zero(); d.len()];
        for (src, dst) in d.chunks(n).zip(out.chunks_mut(n)) {
            let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = src.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = x - lse;
            }
        }
        let shape = va.shape().to_vec();
        Ok(self.push(Op::LogSoftmax, vec![a], Tensor::raw(shape, out)))
    }

    /// Row-wise layer normalization of a matrix with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let vx = self.value(x);
        let (m, n) = vx.dims2()?;
        for p in [gain, bias] {
            if self.value(p).shape() != [n] {
                return Err(Error::dim("layer_norm", vx.shape(), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let inv_n = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for r in 0..m {
            let row = vx.row(r);
            let mu = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..n {
                out[r * n + j] = (row[j] - mu) * rstd * g[j] + b[j];
            }
            means.push(mu);
            rstds.push(rstd);
        }
        let op = Op::LayerNorm {
            mean: means,
            rstd: rstds,
        };
        Ok(self.push(op, vec![x, gain, bias], Tensor::raw(vec![m, n], out)))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2()?;
        if start >= end || end > m {
            return Err(Error::dim("slice_rows", va.shape(), &[start, end]));
        }
        let out = va.data()[start * n..end * n].to_vec();
        Ok(self.push(Op::SliceRows { start }, vec![a], Tensor::raw(vec![end - start, n], out)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2()?;
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", va.shape(), &[start, end]));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&va.row(r)[start..end]);
        }
        Ok(self.push(Op::SliceCols { start }, vec![a], Tensor::raw(vec![m, w], out)))
    }

    /// `out[i] = a[i, indices[i]]`.
    pub fn pick(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2()?;
        if indices.len() != m {
            return Err(Error::dim("pick", va.shape(), &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("index {bad} out of range for width {n}")));
        }
        let out = indices.iter().enumerate().map(|(r, &c)| va.at(r, c)).collect();
        let op = Op::Pick {
            indices: indices.to_vec(),
        };
        Ok(self.push(op, vec![a], Tensor::raw(vec![m], out)))
    }

    /// `sum(x * ln x)` with the convention `0 ln 0 = 0`.
    pub fn xlogx_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if let Some(v) = va.data().iter().find(|v| **v < T::zero()) {
            return Err(Error::Domain {
                op: "xlogx_sum",
                detail: format!("negative input {v}"),
            });
        }
        let s = va
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x * x.ln() } else { T::zero() })
            .sum();
        Ok(self.push(Op::XLogXSum, vec![a], Tensor::scalar(s)))
    }

    // ----- backward --------------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every gradient-tracking leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let inputs = node.inputs.clone();
            let mut send = |idx: usize, gi: Vec<T>| {
                let target = inputs[idx].0;
                if !self.nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(buf) => add_into(buf, &gi),
                    slot @ None => *slot = Some(gi),
                }
            };
            let val = |i: usize| self.nodes[inputs[i].0].value.data();
            let out = node.value.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul => {
                    let (m, k) = self.nodes[inputs[0].0].value.dims2()?;
                    let n = node.value.shape()[1];
                    let (a, b) = (val(0), val(1));
                    // dA = dC . B^T
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &b[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    // dB = A^T . dC
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = a[i * k + p];
                            add_into_scaled(&mut db[p * n..(p + 1) * n], grow, av);
                        }
                    }
                    send(0, da);
                    send(1, db);
                }
                Op::Add => {
                    send(0, g.clone());
                    send(1, g);
                }
                Op::Sub => {
                    send(0, g.clone());
                    send(1, g.iter().map(|&x| -x).collect());
                }
                Op::Mul => {
                    let (a, b) = (val(0), val(1));
                    send(0, g.iter().zip(b).map(|(&x, &y)| x * y).collect());
                    send(1, g.iter().zip(a).map(|(&x, &y)| x * y).collect());
                }
                Op::Scale(s) => {
                    let s = *s;
                    send(0, g.iter().map(|&x| x * s).collect());
                }
                Op::AddBias => {
                    let n = node.value.shape()[1];
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        add_into(&mut db, row);
                    }
                    send(0, g);
                    send(1, db);
                }
                Op::Log => {
                    let a = val(0);
                    send(0, g.iter().zip(a).map(|(&x, &y)| x / y).collect());
                }
                Op::Exp => {
                    send(0, g.iter().zip(out).map(|(&x, &y)| x * y).collect());
                }
                Op::Relu => {
                    let a = val(0);
                    let d = g
                        .iter()
                        .zip(a)
                        .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() })
                        .collect();
                    send(0, d);
                }
                Op::Sum { axis } | Op::Mean { axis } => {
                    let in_shape = self.nodes[inputs[0].0].value.shape();
                    let (outer, len, inner) = axis_split(in_shape, *axis);
                    let s = match node.op {
                        Op::Mean { .. } => T::one() / T::of(len as f64),
                        _ => T::one(),
                    };
                    let mut d = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            for i in 0..inner {
                                d[base + i] = g[o * inner + i] * s;
                            }
                        }
                    }
                    send(0, d);
                }
                Op::SumAll => {
                    let n = self.nodes[inputs[0].0].value.numel();
                    send(0, vec![g[0]; n]);
                }
                Op::Max { argmax } => {
                    let mut d = vec![T::zero(); self.nodes[inputs[0].0].value.numel()];
                    for (&idx, &gv) in argmax.iter().zip(&g) {
                        d[idx] = d[idx] + gv;
                    }
                    send(0, d);
                }
                Op::Concat { axis, sizes } => {
                    let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                    let mut offset = 0;
                    for (idx, &len) in sizes.iter().enumerate() {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        send(idx, d);
                        offset += len;
                    }
                }
                Op::Transpose => {
                    let (n, m) = node.value.dims2()?;
                    let mut d = vec![T::zero(); m * n];
                    for i in 0..n {
                        for j in 0..m {
                            d[j * n + i] = g[i * m + j];
                        }
                    }
                    send(0, d);
                }
                Op::Reshape => send(0, g),
                Op::Embedding { indices } => {
                    let (v, e) = self.nodes[inputs[0].0].value.dims2()?;
                    let mut d = vec![T::zero(); v * e];
                    for (r, &tok) in indices.iter().enumerate() {
                        add_into(&mut d[tok * e..(tok + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                    send(0, d);
                }
                Op::Softmax { axis } => {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let mut d = vec![T::zero(); out.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: T = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                            for k in 0..len {
                                d[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                    send(0, d);
                }
                Op::MaskedSoftmax => {
                    let n = node.value.shape()[1];
                    let mut d = vec![T::zero(); out.len()];
                    for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(d.chunks_mut(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    send(0, d);
                }
                Op::LogSoftmax => {
                    let n = *node.value.shape().last().unwrap();
                    let mut d = vec![T::zero(); out.len()];
                    for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(d.chunks_mut(n)) {
                        let total: T = gr.iter().copied().sum();
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv = gv - yv.exp() * total;
                        }
                    }
                    send(0, d);
                }
                Op::LayerNorm { mean, rstd } => {
                    let (m, n) = node.value.dims2()?;
                    let (x, gain) = (val(0), val(1));
                    let inv_n = T::one() / T::of(n as f64);
                    let mut dx = vec![T::zero(); m * n];
                    let mut dgain = vec![T::zero(); n];
                    let mut dbias = vec![T::zero(); n];
                    let mut xhat = vec![T::zero(); n];
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            xhat[j] = (x[r * n + j] - mean[r]) * rstd[r];
                            dxhat[j] = gv * gain[j];
                            dgain[j] = dgain[j] + gv * xhat[j];
                            dbias[j] = dbias[j] + gv;
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() * inv_n;
                        let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                        for j in 0..n {
                            dx[r * n + j] = rstd[r] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                    send(0, dx);
                    send(1, dgain);
                    send(2, dbias);
                }
                Op::SliceRows { start } => {
                    let src = &self.nodes[inputs[0].0].value;
                    let n = src.shape()[1];
                    let mut d = vec![T::zero(); src.numel()];
                    d[start * n..start * n + g.len()].copy_from_slice(&g);
                    send(0, d);
                }
                Op::SliceCols { start } => {
                    let (m, n) = self.nodes[inputs[0].0].value.dims2()?;
                    let w = node.value.shape()[1];
                    let mut d = vec![T::zero(); m * n];
                    for r in 0..m {
                        d[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    send(0, d);
                }
                Op::Pick { indices } => {
                    let (m, n) = self.nodes[inputs[0].0].value.dims2()?;
                    let mut d = vec![T::zero(); m * n];
                    for (r, &c) in indices.iter().enumerate() {
                        d[r * n + c] = g[r];
                    }
                    send(0, d);
                }
                Op::XLogXSum => {
                    let d = val(0)
                        .iter()
                        .map(|&x| if x > T::zero() { g[0] * (x.ln() + T::one()) } else { T::zero() })
                        .collect();
                    send(0, d);
                }
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[id];
            if let (Op::Leaf, Some(g), true) = (&node.op, g, node.needs_grad) {
                match &mut node.leaf_grad {
                    Some(buf) => add_into(buf, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn add_into_scaled<T: Scalar>(dst: &mut [T], src: &[T], s: T) {
    if s == T::zero() {
        return;
    }
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b * s);
}
