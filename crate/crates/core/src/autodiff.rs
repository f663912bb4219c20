//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node whose inputs
//! already exist, so node order is a topological order and [`Graph::backward`]
//! is a single reverse sweep. Leaves are either parameters (gradients wanted)
//! or constants; gradients are only propagated through nodes that depend on a
//! parameter.

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, gemm_acc, normal_cdf, normal_pdf, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowVec(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, indices: Vec<usize> },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu(Var),
    Attention { qkv: Var, batch: usize, heads: usize },
    Sum(Var),
    Mean(Var),
    RowMse { pred: Var, target_rows: Vec<bool> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    // op-specific activations kept for the backward pass
    saved: Vec<T>,
    saved_aux: Vec<T>,
}

/// Operation tape. Single-threaded; independent graphs may run in parallel.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
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

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.push_saved(value, op, needs_grad, Vec::new(), Vec::new())
    }

    fn push_saved(
        &mut self,
        value: Tensor<T>,
        op: Op,
        needs_grad: bool,
        saved: Vec<T>,
        saved_aux: Vec<T>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            saved,
            saved_aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = gemm(self.value(a), ta, self.value(b), tb)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, ta, b, tb }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// Adds a vector of length `last_dim(x)` to every row of `x`.
    pub fn add_row_vec(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = xv.last_dim();
        if bv.numel() != d {
            return Err(Error::dim("add_row_vec", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRowVec(x, bias), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let value = self.value(x).map(|v| v * f);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, factor), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Transpose(x), needs))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::Contract(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceCols { x, start }, needs))
    }

    /// Side-by-side concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| {
            Error::Contract("concat_cols needs at least one input".into())
        })?);
        let (rows, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::dim("concat_cols", first.shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| {
            Error::Contract("concat_rows needs at least one input".into())
        })?);
        let (_, cols) = first.dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let (r, c) = v.dims2()?;
            if c != cols {
                return Err(Error::dim("concat_rows", first.shape(), v.shape()));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Row gather; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(x).gather_rows(indices)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = tensor::softmax(self.value(x), axis)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax { x, axis }, needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, stats) =
            tensor::layer_norm_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push_saved(
            value,
            Op::LayerNorm { x, gamma, beta },
            needs,
            stats.xhat,
            stats.rstd,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = tensor::gelu(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Gelu(x), needs)
    }

    /// Multi-head self-attention over `batch` equal-length sequences stacked
    /// row-wise in `qkv` (see [`tensor::attention`]).
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let (value, probs) = tensor::attention(self.value(qkv), batch, heads)?;
        let needs = self.needs(qkv);
        Ok(self.push_saved(
            value,
            Op::Attention { qkv, batch, heads },
            needs,
            probs,
            Vec::new(),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / T::of(v.numel() as f64));
        let needs = self.needs(x);
        self.push(value, Op::Mean(x), needs)
    }

    /// Mean over the selected rows of the per-row mean squared error
    /// between `pred` and the constant `target` (both 2-D, same shape).
    /// With no row selected the loss is zero.
    pub fn row_mse(&mut self, pred: Var, target: &Tensor<T>, rows: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        let (r, c) = pv.dims2()?;
        if pv.shape() != target.shape() {
            return Err(Error::dim("row_mse", pv.shape(), target.shape()));
        }
        if rows.len() != r {
            return Err(Error::dim("row_mse rows", &[r], &[rows.len()]));
        }
        let selected = rows.iter().filter(|&&s| s).count();
        let mut residual = vec![T::zero(); r * c];
        let mut total = T::zero();
        for i in (0..r).filter(|&i| rows[i]) {
            let mut row_sum = T::zero();
            for j in 0..c {
                let d = pv.data()[i * c + j] - target.data()[i * c + j];
                residual[i * c + j] = d;
                row_sum += d * d;
            }
            total += row_sum / T::of(c as f64);
        }
        let loss = if selected == 0 {
            T::zero()
        } else {
            total / T::of(selected as f64)
        };
        let needs = self.needs(pred);
        Ok(self.push_saved(
            Tensor::scalar(loss),
            Op::RowMse {
                pred,
                target_rows: rows.to_vec(),
            },
            needs,
            residual,
            Vec::new(),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, ta, b, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    // op(A)=A: dA = dC·op(B)ᵀ ; op(A)=Aᵀ: dA = op(B)·dCᵀ
                    let buf = grad_buf(grads, a, av.shape());
                    if ta {
                        gemm_acc(bv, tb, dy, true, T::one(), buf)?;
                    } else {
                        gemm_acc(dy, false, bv, !tb, T::one(), buf)?;
                    }
                }
                if self.needs(b) {
                    // op(B)=B: dB = op(A)ᵀ·dC ; op(B)=Bᵀ: dB = dCᵀ·op(A)
                    let buf = grad_buf(grads, b, bv.shape());
                    if tb {
                        gemm_acc(dy, true, av, ta, T::one(), buf)?;
                    } else {
                        gemm_acc(av, !ta, dy, false, T::one(), buf)?;
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        axpy(grad_buf(grads, v, dy.shape()), dy.data(), T::one());
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    axpy(grad_buf(grads, a, dy.shape()), dy.data(), T::one());
                }
                if self.needs(b) {
                    axpy(grad_buf(grads, b, dy.shape()), dy.data(), -T::one());
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    let buf = grad_buf(grads, a, dy.shape());
                    for ((g, &d), &y) in buf.iter_mut().zip(dy.data()).zip(bv) {
                        *g += d * y;
                    }
                }
                if self.needs(b) {
                    let buf = grad_buf(grads, b, dy.shape());
                    for ((g, &d), &x) in buf.iter_mut().zip(dy.data()).zip(av) {
                        *g += d * x;
                    }
                }
            }
            &Op::AddRowVec(x, bias) => {
                if self.needs(x) {
                    axpy(grad_buf(grads, x, dy.shape()), dy.data(), T::one());
                }
                if self.needs(bias) {
                    let bshape = self.value(bias).shape().to_vec();
                    let d = dy.last_dim();
                    let buf = grad_buf(grads, bias, &bshape);
                    for row in dy.data().chunks(d) {
                        for (g, &v) in buf.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
            }
            &Op::Scale(x, factor) => {
                axpy(grad_buf(grads, x, dy.shape()), dy.data(), T::of(factor));
            }
            &Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                axpy(grad_buf(grads, x, &shape), dy.data(), T::one());
            }
            &Op::Transpose(x) => {
                let t = dy.transpose()?;
                let shape = self.value(x).shape().to_vec();
                axpy(grad_buf(grads, x, &shape), t.data(), T::one());
            }
            &Op::SliceCols { x, start } => {
                let shape = self.value(x).shape().to_vec();
                let (_, c) = (shape[0], shape[1]);
                let w = dy.last_dim();
                let buf = grad_buf(grads, x, &shape);
                for (r, row) in dy.data().chunks(w).enumerate() {
                    axpy(&mut buf[r * c + start..r * c + start + w], row, T::one());
                }
            }
            Op::ConcatCols(parts) => {
                let total = dy.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let w = shape[1];
                    if self.needs(p) {
                        let buf = grad_buf(grads, p, &shape);
                        for (r, row) in dy.data().chunks(total).enumerate() {
                            axpy(&mut buf[r * w..(r + 1) * w], &row[offset..offset + w], T::one());
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = shape[0] * shape[1];
                    if self.needs(p) {
                        axpy(grad_buf(grads, p, &shape), &dy.data()[offset..offset + n], T::one());
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, indices } => {
                let shape = self.value(*x).shape().to_vec();
                let c = shape[1];
                let buf = grad_buf(grads, *x, &shape);
                for (r, &src) in indices.iter().enumerate() {
                    axpy(
                        &mut buf[src * c..(src + 1) * c],
                        &dy.data()[r * c..(r + 1) * c],
                        T::one(),
                    );
                }
            }
            &Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = tensor::axis_split(y.shape(), axis)?;
                let shape = y.shape().to_vec();
                let buf = grad_buf(grads, x, &shape);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| o * len * inner + t * inner + i;
                        let mut dot = T::zero();
                        for t in 0..len {
                            dot += dy.data()[at(t)] * y.data()[at(t)];
                        }
                        for t in 0..len {
                            buf[at(t)] += y.data()[at(t)] * (dy.data()[at(t)] - dot);
                        }
                    }
                }
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let d = dy.last_dim();
                let xhat = &node.saved;
                let rstd = &node.saved_aux;
                let g = self.value(gamma).data().to_vec();
                if self.needs(beta) {
                    let shape = self.value(beta).shape().to_vec();
                    let buf = grad_buf(grads, beta, &shape);
                    for row in dy.data().chunks(d) {
                        axpy(buf, row, T::one());
                    }
                }
                if self.needs(gamma) {
                    let shape = self.value(gamma).shape().to_vec();
                    let buf = grad_buf(grads, gamma, &shape);
                    for (row, h) in dy.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += row[j] * h[j];
                        }
                    }
                }
                if self.needs(x) {
                    let shape = self.value(x).shape().to_vec();
                    let buf = grad_buf(grads, x, &shape);
                    let dn = T::of(d as f64);
                    for (r, (row, h)) in dy.data().chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = row[j] * g[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let dh = row[j] * g[j];
                            buf[r * d + j] += rstd[r] * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let buf = grad_buf(grads, x, dy.shape());
                for ((g, &d), &v) in buf.iter_mut().zip(dy.data()).zip(xv.data()) {
                    *g += d * (normal_cdf(v) + v * normal_pdf(v));
                }
            }
            &Op::Attention { qkv, batch, heads } => {
                let qv = self.value(qkv);
                let buf = grad_buf(grads, qkv, qv.shape());
                tensor::attention_backward(qv, &node.saved, dy, batch, heads, buf)?;
            }
            &Op::Sum(x) => {
                let shape = self.value(x).shape().to_vec();
                let d = dy.data()[0];
                grad_buf(grads, x, &shape).iter_mut().for_each(|g| *g += d);
            }
            &Op::Mean(x) => {
                let shape = self.value(x).shape().to_vec();
                let n = self.value(x).numel();
                let d = dy.data()[0] / T::of(n as f64);
                grad_buf(grads, x, &shape).iter_mut().for_each(|g| *g += d);
            }
            Op::RowMse { pred, target_rows } => {
                let shape = self.value(*pred).shape().to_vec();
                let c = shape[1];
                let selected = target_rows.iter().filter(|&&s| s).count();
                if selected > 0 {
                    let k = dy.data()[0] * T::of(2.0 / (selected * c) as f64);
                    let buf = grad_buf(grads, *pred, &shape);
                    axpy(buf, &node.saved, k);
                }
            }
        }
        Ok(())
    }
}

fn grad_buf<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
) -> &'a mut [T] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
        .data_mut()
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}
