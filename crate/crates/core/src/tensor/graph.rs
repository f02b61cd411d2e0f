use std::sync::Arc;

use super::{gemm, GradientMap, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul { a: Var, b: Var, b_t: bool },
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// An eagerly evaluated computation graph. Nodes are appended in evaluation
/// order, so reverse insertion order is a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A named parameter leaf sharing its buffer with the caller.
    pub fn param(&mut self, name: &str, value: &Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::clone(value),
            op: Op::Leaf,
            requires_grad,
            param: Some(name.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    /// Every parameter of `store` as a leaf, in store order.
    pub fn params_from(&mut self, store: &ParamStore) -> Vec<Var> {
        store
            .iter()
            .map(|p| self.param(&p.name, &p.value, p.trainable))
            .collect()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `x[m×n] + bias[n]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).numel() != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (d, bj) in data[i * n..(i + 1) * n].iter_mut().zip(b) {
                *d += bj;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::AddRow(x, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Dimension {
                op: if b_t { "matmul_t" } else { "matmul" },
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_t,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul { a, b, b_t },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow(axis={axis}, start={start}, len={len}) invalid for {shape:?}"
            )));
        }
        let (outer, n_axis, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n_axis + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    /// Row lookup `table[ids[i], :]`; backward scatter-adds into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::Shape("embedding lookup with no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index(format!("id {bad} out of range for {vocab} rows")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Layer normalization over the last dim of a rank-2 input.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map(x, gelu_scalar);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |z| z.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x, axis }, rg))
    }

    /// Row softmax of a rank-2 input where `visible[i*n + j] == false` forces
    /// probability zero. Every row must keep at least one visible entry.
    pub fn masked_softmax(&mut self, x: Var, visible: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        if visible.len() != m * n {
            return Err(Error::Shape(format!(
                "mask has {} entries for a {m}x{n} input",
                visible.len()
            )));
        }
        let src = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let vis = &visible[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (v, &on) in row.iter().zip(vis) {
                if on {
                    if !v.is_finite() {
                        return Err(Error::Numeric("softmax input is not finite".into()));
                    }
                    max = max.max(*v);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("softmax row {i} has no visible entries")));
            }
            let mut z = 0.0;
            for j in 0..n {
                if vis[j] {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|p| *p /= z);
        }
        let rg = self.rg(x);
        // Masked entries are exactly zero, so the plain softmax VJP applies.
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::Softmax { x, axis: 1 },
            rg,
        ))
    }

    /// Mean token negative log-likelihood: `−(1/T)·Σ_t log softmax(logits)[t, target_t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, vocab) = t.dims2()?;
        if rows != targets.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|&&y| y >= vocab) {
            return Err(Error::Index(format!("target {bad} out of range for vocab {vocab}")));
        }
        if !t.all_finite() {
            return Err(Error::Numeric("cross_entropy logits are not finite".into()));
        }
        let src = t.data();
        let mut probs = vec![0.0; rows * vocab];
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = &src[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[y];
            for j in 0..vocab {
                probs[i * vocab + j] = (row[j] - lse).exp();
            }
        }
        loss /= rows as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let mut acc = *iter
            .next()
            .ok_or_else(|| Error::Shape("add_all of zero terms".into()))?;
        for t in iter {
            acc = self.add(acc, *t)?;
        }
        Ok(acc)
    }

    /// Reverse-mode gradients of the scalar `loss`. Gradients are computed
    /// fresh on every call; nothing accumulates across calls.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if let (Some(name), true) = (&node.param, node.requires_grad) {
                params.push((name.clone(), i));
            }
        }
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.rg(v) {
                        axpy(self.slot(grads, v), sign, gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.rg(v) {
                        axpy(self.slot(grads, v), sign, gd);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.rg(v) {
                        let o = self.value(other).data();
                        let s = self.slot(grads, v).data_mut();
                        for ((s, gi), oi) in s.iter_mut().zip(gd).zip(o) {
                            *s += gi * oi;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    axpy(self.slot(grads, *a), *c, gd);
                }
            }
            Op::AddRow(x, bias) => {
                if self.rg(*x) {
                    axpy(self.slot(grads, *x), 1.0, gd);
                }
                if self.rg(*bias) {
                    let n = self.value(*bias).numel();
                    let s = self.slot(grads, *bias).data_mut();
                    for row in gd.chunks(n) {
                        for (s, gi) in s.iter_mut().zip(row) {
                            *s += gi;
                        }
                    }
                }
            }
            Op::MatMul { a, b, b_t } => {
                let (m, k) = self.value(*a).dims2()?;
                let n = g.shape()[1];
                if self.rg(*a) {
                    // dA = dC · op(B)ᵀ
                    let bv = self.value(*b).data();
                    let s = self.slot(grads, *a).data_mut();
                    gemm(m, n, k, gd, false, bv, !b_t, s, true);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let s = self.slot(grads, *b).data_mut();
                    if *b_t {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, gd, true, av, false, s, true);
                    } else {
                        // B is k×n: dB = Aᵀ · dC
                        gemm(k, m, n, av, true, gd, false, s, true);
                    }
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let gt = g.transpose()?;
                    axpy(self.slot(grads, *a), 1.0, gt.data());
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    axpy(self.slot(grads, *a), 1.0, gd);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                let total = g.shape()[*axis];
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.rg(*p) {
                        let s = self.slot(grads, *p).data_mut();
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut s[o * len * inner..(o + 1) * len * inner];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.rg(*x) {
                    let (outer, n_axis, inner) = split_axis(self.shape(*x), *axis);
                    let len = g.shape()[*axis];
                    let s = self.slot(grads, *x).data_mut();
                    for o in 0..outer {
                        let base = (o * n_axis + start) * inner;
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        for (d, v) in s[base..base + len * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let d = self.shape(*table)[1];
                    let s = self.slot(grads, *table).data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for (dst, v) in s[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *dst += v;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).numel();
                let m = rstd.len();
                if self.rg(*gamma) {
                    let s = self.slot(grads, *gamma).data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            s[j] += gd[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let s = self.slot(grads, *beta).data_mut();
                    for row in gd.chunks(n) {
                        for (s, v) in s.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let s = self.slot(grads, *x).data_mut();
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let xh = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gd[i * n + j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            s[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    let s = self.slot(grads, *x).data_mut();
                    for ((s, gi), xi) in s.iter_mut().zip(gd).zip(xv) {
                        *s += gi * gelu_grad(*xi);
                    }
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    let s = self.slot(grads, *x).data_mut();
                    for ((s, gi), xi) in s.iter_mut().zip(gd).zip(xv) {
                        if *xi > 0.0 {
                            *s += gi;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let s = self.slot(grads, *x).data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                s[idx(k)] += y[idx(k)] * (gd[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.rg(*logits) {
                    let rows = targets.len();
                    let vocab = probs.len() / rows;
                    let c = gd[0] / rows as f64;
                    let s = self.slot(grads, *logits).data_mut();
                    for (i, &y) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            s[i * vocab + j] += c * (probs[i * vocab + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let c = gd[0];
                    self.slot(grads, *x).data_mut().iter_mut().for_each(|s| *s += c);
                }
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)))
    }
}

fn axpy(dst: &mut Tensor, alpha: f64, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient of a leaf. `None` for leaves that do not require grad.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable named parameter, zero-filled when the
    /// loss does not reach it. A name bound twice gets the summed gradient.
    pub fn param_grads(&self) -> GradientMap {
        let mut map = GradientMap::new();
        for (name, idx) in &self.params {
            let g = self.grads[*idx].clone().expect("leaf grads are filled");
            let mut single = GradientMap::new();
            single.insert(name.clone(), g);
            map.merge(single).expect("same name implies same shape");
        }
        map
    }
}
