//! Record-then-replay reverse-mode differentiation.
//!
//! Every operation appends a node holding its value. Nodes that depend on a
//! tracked leaf also keep the op needed to propagate adjoints. `backward`
//! walks the node list once in reverse, which is a valid reverse topological
//! order because inputs always precede outputs.

use std::sync::Arc;

use super::kernels;
use super::{matmul_dims, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Silu(Var),
    Softmax(Var),
    RmsNorm { x: Var, group: usize, inv: Vec<T> },
    LayerNorm { x: Var, group: usize, inv: Vec<T> },
    Rope { x: Var, positions: Arc<Vec<usize>>, head_dim: usize, base: f64 },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Gather { table: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    retain: bool,
}

/// Ordered record of tensor operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_passes: usize,
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_passes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of completed `backward` calls.
    pub fn backward_passes(&self) -> usize {
        self.backward_passes
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        // untracked results never need their op again
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    /// Keeps the gradient of an intermediate node after `backward`, so it can
    /// be read with [`Tape::grad`] like a leaf's.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// Accumulated gradient of a tracked leaf or retained node, if any has
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.value(v).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of a leaf, zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`: the layout of a linear layer with `[out, in]` weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(dim_err("matmul_nt", sa, sb)),
        };
        let out = kernels::matmul_nt(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    fn row_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let cols = self.value(a).cols();
        if self.value(b).len() != cols {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(cols)
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let cols = self.row_check("add_row", a, b)?;
        let bv = self.data(b);
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % cols])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, b), rg))
    }

    /// Multiplies every row of `a` elementwise by the vector `w`.
    pub fn mul_row(&mut self, a: Var, w: Var) -> Result<Var> {
        let cols = self.row_check("mul_row", a, w)?;
        let wv = self.data(w);
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * wv[i % cols])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, w]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulRow(a, w), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sigmoid(a), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Silu(a), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    /// Softmax along the last axis where `mask[i] == false` entries are
    /// excluded and come out as exact zeros. The mask is the flattened
    /// row-major layout of `a`.
    pub fn softmax_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(dim_err("softmax_mask", x.shape(), &[m.len()]));
            }
        }
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let out = kernels::softmax_rows(x.data(), x.cols(), mask);
        let shape = x.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), rg))
    }

    /// RMS normalisation over consecutive chunks of `group` elements (no gain).
    pub fn rms_norm(&mut self, a: Var, group: usize, eps: T) -> Result<Var> {
        let x = self.value(a);
        if group == 0 || x.cols() % group != 0 {
            return Err(dim_err("rms_norm", x.shape(), &[group]));
        }
        let mut out = x.data().to_vec();
        let mut inv = Vec::with_capacity(x.len() / group);
        for chunk in out.chunks_mut(group) {
            let ms = chunk.iter().map(|&v| v * v).sum::<T>() / T::of(group as f64);
            let r = T::one() / (ms + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v *= r);
            inv.push(r);
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::RmsNorm { x: a, group, inv }, rg))
    }

    /// Mean/variance normalisation over chunks of `group` elements (no affine).
    pub fn layer_norm(&mut self, a: Var, group: usize, eps: T) -> Result<Var> {
        let x = self.value(a);
        if group == 0 || x.cols() % group != 0 {
            return Err(dim_err("layer_norm", x.shape(), &[group]));
        }
        let n = T::of(group as f64);
        let mut out = x.data().to_vec();
        let mut inv = Vec::with_capacity(x.len() / group);
        for chunk in out.chunks_mut(group) {
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * r);
            inv.push(r);
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x: a, group, inv }, rg))
    }

    /// Rotary embedding: row `r` is rotated for `positions[r]`, each
    /// `head_dim` chunk independently.
    pub fn rope(&mut self, a: Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var> {
        let x = self.value(a);
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even head dim, got {head_dim}")));
        }
        if x.cols() % head_dim != 0 || positions.len() != x.rows() {
            return Err(dim_err("rope", x.shape(), &[positions.len(), head_dim]));
        }
        let out = kernels::rope_rows(x.data(), x.cols(), head_dim, positions, base, false);
        let shape = x.shape().to_vec();
        let rg = self.rg(&[a]);
        let op = Op::Rope {
            x: a,
            positions: Arc::new(positions.to_vec()),
            head_dim,
            base,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Concatenates rank-2 tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.shape(*p).len() != 2 || self.value(*p).rows() != rows {
                return Err(dim_err("concat_cols", self.shape(*first), self.shape(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks rank-2 tensors with equal column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(dim_err("concat_rows", self.shape(*first), v.shape()));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 || start + len > x.cols() {
            return Err(dim_err("slice_cols", x.shape(), &[start, len]));
        }
        let out: Vec<T> = (0..x.rows())
            .flat_map(|r| x.row(r)[start..start + len].iter().copied())
            .collect();
        let rows = x.rows();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { x: a, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 || start + len > x.rows() {
            return Err(dim_err("slice_rows", x.shape(), &[start, len]));
        }
        let c = x.cols();
        let out = x.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![len, c], out)?, Op::SliceRows { x: a, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Input(format!("row index {bad} out of range {}", t.rows())));
        }
        let c = t.cols();
        let out: Vec<T> = indices.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let rg = self.rg(&[table]);
        let op = Op::Gather {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::new(vec![indices.len(), c], out)?, op, rg))
    }

    /// Sum over rows of `-log softmax(logits)[target]`; a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (rows, cols) = (x.rows(), x.cols());
        if targets.len() != rows {
            return Err(dim_err("cross_entropy", x.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Input(format!("target {bad} out of range {cols}")));
        }
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN logits".into()));
        }
        let probs = kernels::softmax_rows(x.data(), cols, None);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    /// Accumulates d`loss`/d`leaf` into every tracked leaf.
    ///
    /// Gradients add up across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Contract("loss does not depend on any tracked tensor".into()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            if matches!(self.nodes[i].op, Op::Leaf) || self.nodes[i].retain {
                add_into(&mut self.grads[i], &g);
            }
        }
        self.backward_passes += 1;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let tracked = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, d: Vec<T>| {
            if tracked(v) {
                match &mut adj[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(d),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if tracked(*a) {
                    send(*a, kernels::matmul_nt(g, self.data(*b), m, n, k));
                }
                if tracked(*b) {
                    send(*b, kernels::matmul_tn(self.data(*a), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if tracked(*a) {
                    send(*a, kernels::matmul(g, self.data(*b), m, n, k));
                }
                if tracked(*b) {
                    send(*b, kernels::matmul_tn(g, self.data(*a), m, n, k));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    send(*a, g.iter().zip(self.data(*b)).map(|(&x, &y)| x * y).collect());
                }
                if tracked(*b) {
                    send(*b, g.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddRow(a, b) => {
                send(*a, g.to_vec());
                if tracked(*b) {
                    let cols = self.value(*b).len();
                    let mut db = vec![T::zero(); cols];
                    for (j, &x) in g.iter().enumerate() {
                        db[j % cols] += x;
                    }
                    send(*b, db);
                }
            }
            Op::MulRow(a, w) => {
                let wv = self.data(*w);
                let cols = wv.len();
                if tracked(*a) {
                    send(*a, g.iter().enumerate().map(|(j, &x)| x * wv[j % cols]).collect());
                }
                if tracked(*w) {
                    let mut dw = vec![T::zero(); cols];
                    for (j, (&x, &av)) in g.iter().zip(self.data(*a)).enumerate() {
                        dw[j % cols] += x * av;
                    }
                    send(*w, dw);
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|&x| x * *c).collect()),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(&x, &s)| x * s * (T::one() - s)).collect());
            }
            Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&gx, &x)| {
                        let s = sigmoid(x);
                        gx * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                send(*a, d);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut d = vec![T::zero(); y.len()];
                for r in 0..y.len() / cols.max(1) {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let inner: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..cols {
                        d[r * cols + j] = yr[j] * (gr[j] - inner);
                    }
                }
                send(*a, d);
            }
            Op::RmsNorm { x, group, inv } => {
                let y = node.value.data();
                let n = T::of(*group as f64);
                let mut d = vec![T::zero(); y.len()];
                for (c, &r) in inv.iter().enumerate() {
                    let s = c * group;
                    let gy: T = (s..s + group).map(|j| g[j] * y[j]).sum::<T>() / n;
                    for j in s..s + group {
                        d[j] = r * (g[j] - y[j] * gy);
                    }
                }
                send(*x, d);
            }
            Op::LayerNorm { x, group, inv } => {
                let y = node.value.data();
                let n = T::of(*group as f64);
                let mut d = vec![T::zero(); y.len()];
                for (c, &r) in inv.iter().enumerate() {
                    let s = c * group;
                    let gm: T = g[s..s + group].iter().copied().sum::<T>() / n;
                    let gy: T = (s..s + group).map(|j| g[j] * y[j]).sum::<T>() / n;
                    for j in s..s + group {
                        d[j] = r * (g[j] - gm - y[j] * gy);
                    }
                }
                send(*x, d);
            }
            Op::Rope {
                x,
                positions,
                head_dim,
                base,
            } => {
                let cols = node.value.cols();
                send(*x, kernels::rope_rows(g, cols, *head_dim, positions, *base, true));
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if tracked(*p) {
                        let d = (0..rows)
                            .flat_map(|r| g[r * total + offset..r * total + offset + c].iter().copied())
                            .collect();
                        send(*p, d);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if tracked(*p) {
                        send(*p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let (rows, cols) = (src.rows(), src.cols());
                let len = node.value.cols();
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                send(*x, d);
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let c = src.cols();
                let mut d = vec![T::zero(); src.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                send(*x, d);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Gather { table, indices } => {
                let t = self.value(*table);
                let c = t.cols();
                let mut d = vec![T::zero(); t.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[r * c + j];
                    }
                }
                send(*table, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.value(*logits).cols();
                let mut d: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] -= g[0];
                }
                send(*logits, d);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_leaf_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn linear_rule_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let c = tape.constant(t(&[3], &[4.0, 5.0, -6.0]));
        let cx = tape.mul(c, x).unwrap();
        let loss = tape.sum(cx).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 5.0, -6.0]);
        assert!(tape.grad(c).is_none());
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[8.0, 10.0, -12.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.backward_passes(), 2);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_softmax_zeroes_hidden_entries() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 3], &[1.0, 50.0, 1.0]));
        let p = tape
            .softmax_masked(x, Some(&[true, false, true]))
            .unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.0, 0.5]);
    }
}
