//! Dense row-major tensors and the pure kernels the autodiff graph is built on.
//!
//! Two precisions are supported through [`Scalar`]: `f64` for gradient
//! checking and reproducibility tests, `f32` for training. Broadcasting is
//! limited to last-axis parameter vectors (bias, layer-norm gain/shift).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + Default + Debug + Display + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    /// Width in bits, used in checkpoint and manifest records.
    const BITS: u32;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;

    /// `C = alpha * op(A) * op(B) + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major dense tensor. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!("zero-sized dimension in {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Contract(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    /// Length of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have at least one axis")
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Plain matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        gemm(self, false, other, false)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Gather rows of a 2-D tensor (indices may repeat).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Contract(format!("row index {i} out of range for {r} rows")));
            }
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![indices.len(), c], out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

/// `op(A) · op(B)` where `op` optionally transposes a 2-D operand.
pub fn gemm<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a, ta, b, tb, T::zero(), &mut out)?;
    Tensor::new(vec![m, n], out)
}

/// `out = op(A) · op(B) + beta · out`, `out` row-major with the product's shape.
pub fn gemm_acc<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    beta: T,
    out: &mut [T],
) -> Result<()> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k, rsa, csa) = if ta {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if tb {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    if out.len() != m * n {
        return Err(Error::dim("matmul output", &[m, n], &[out.len()]));
    }
    // SAFETY: dimensions and strides were derived from the owned buffers above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)` for strided loops.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| o * len * inner + t * inner + i;
            let mut max = T::neg_infinity();
            for t in 0..len {
                max = max.max(src[at(t)]);
            }
            let mut total = T::zero();
            for t in 0..len {
                let e = (src[at(t)] - max).exp();
                out[at(t)] = e;
                total += e;
            }
            for t in 0..len {
                out[at(t)] = out[at(t)] / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-row statistics produced by [`layer_norm`]; the backward pass reuses them.
pub(crate) struct NormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layer_norm_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_stats<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    let rows = x.numel() / d;
    let dn = T::of(d as f64);
    let eps = T::of(eps);
    let (g, b) = (gamma.data(), beta.data());
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, NormStats { xhat, rstd }))
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal CDF via the exact error function.
pub(crate) fn normal_cdf<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

/// Standard normal density.
pub(crate) fn normal_pdf<T: Scalar>(x: T) -> T {
    T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (T::of(-0.5) * x * x).exp()
}

/// GELU in its exact form `x · Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * normal_cdf(v))
}

/// Strided 2-D window into a flat buffer.
#[derive(Clone, Copy, Debug)]
struct View {
    off: usize,
    rs: usize,
    cs: usize,
    rows: usize,
    cols: usize,
}

impl View {
    fn t(self) -> View {
        View {
            rs: self.cs,
            cs: self.rs,
            rows: self.cols,
            cols: self.rows,
            ..self
        }
    }

    fn end(&self) -> usize {
        self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
    }
}

/// `c = alpha · a · b + beta · c` over strided views.
#[allow(clippy::too_many_arguments)]
fn gemm_view<T: Scalar>(
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    assert!(av.cols == bv.rows && av.rows == cv.rows && bv.cols == cv.cols);
    assert!(av.end() <= a.len() && bv.end() <= b.len() && cv.end() <= c.len());
    // SAFETY: the assertions above keep every view inside its buffer, and `c`
    // is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Shape bookkeeping for [`attention`].
#[derive(Clone, Copy, Debug)]
struct AttnDims {
    len: usize,
    embed: usize,
    head_dim: usize,
}

fn attn_dims<T: Scalar>(qkv: &Tensor<T>, batch: usize, heads: usize) -> Result<AttnDims> {
    let (rows, c3) = qkv.dims2()?;
    if batch == 0 || heads == 0 || rows % batch != 0 || c3 % 3 != 0 || (c3 / 3) % heads != 0 {
        return Err(Error::Contract(format!(
            "attention over {rows}x{c3} qkv with batch {batch} and {heads} heads"
        )));
    }
    Ok(AttnDims {
        len: rows / batch,
        embed: c3 / 3,
        head_dim: c3 / 3 / heads,
    })
}

fn head_views(dims: AttnDims, b: usize, h: usize) -> (View, View, View, View) {
    let AttnDims {
        len,
        embed,
        head_dim,
    } = dims;
    let base = b * len * 3 * embed + h * head_dim;
    let qkv = |part: usize| View {
        off: base + part * embed,
        rs: 3 * embed,
        cs: 1,
        rows: len,
        cols: head_dim,
    };
    let out = View {
        off: b * len * embed + h * head_dim,
        rs: embed,
        cs: 1,
        rows: len,
        cols: head_dim,
    };
    (qkv(0), qkv(1), qkv(2), out)
}

/// Multi-head scaled dot-product self-attention.
///
/// `qkv` stacks `batch` sequences of equal length row-wise; its columns are
/// `[Q | K | V]`, each split evenly into `heads`. Returns the concatenated
/// head outputs `[rows × E]` and the attention probabilities
/// (`batch × heads × len × len`, needed for the backward pass).
pub fn attention<T: Scalar>(
    qkv: &Tensor<T>,
    batch: usize,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let dims = attn_dims(qkv, batch, heads)?;
    let l = dims.len;
    let scale = T::of(1.0 / (dims.head_dim as f64).sqrt());
    let mut out = vec![T::zero(); batch * l * dims.embed];
    let mut probs = vec![T::zero(); batch * heads * l * l];
    let pv = View {
        off: 0,
        rs: l,
        cs: 1,
        rows: l,
        cols: l,
    };
    for b in 0..batch {
        for h in 0..heads {
            let (q, k, v, o) = head_views(dims, b, h);
            let p = &mut probs[(b * heads + h) * l * l..][..l * l];
            gemm_view(scale, qkv.data(), q, qkv.data(), k.t(), T::zero(), p, pv);
            for row in p.chunks_mut(l) {
                let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut total = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x = *x / total;
                }
            }
            gemm_view(T::one(), p, pv, qkv.data(), v, T::zero(), &mut out, o);
        }
    }
    Ok((Tensor::new(vec![batch * l, dims.embed], out)?, probs))
}

/// Gradient of [`attention`] with respect to `qkv` given the output gradient.
pub(crate) fn attention_backward<T: Scalar>(
    qkv: &Tensor<T>,
    probs: &[T],
    dy: &Tensor<T>,
    batch: usize,
    heads: usize,
    dqkv: &mut [T],
) -> Result<()> {
    let dims = attn_dims(qkv, batch, heads)?;
    let l = dims.len;
    let scale = T::of(1.0 / (dims.head_dim as f64).sqrt());
    let pv = View {
        off: 0,
        rs: l,
        cs: 1,
        rows: l,
        cols: l,
    };
    let mut ds = vec![T::zero(); l * l];
    for b in 0..batch {
        for h in 0..heads {
            let (q, k, v, o) = head_views(dims, b, h);
            let p = &probs[(b * heads + h) * l * l..][..l * l];
            // dV += Pᵀ dO ; dP = dO Vᵀ
            gemm_view(T::one(), p, pv.t(), dy.data(), o, T::one(), dqkv, v);
            gemm_view(T::one(), dy.data(), o, qkv.data(), v.t(), T::zero(), &mut ds, pv);
            for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
                let dot: T = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum();
                for (d, &p) in drow.iter_mut().zip(prow) {
                    *d = p * (*d - dot);
                }
            }
            // dQ += s·dS K ; dK += s·dSᵀ Q
            gemm_view(scale, &ds, pv, qkv.data(), k, T::one(), dqkv, q);
            gemm_view(scale, &ds, pv.t(), qkv.data(), q, T::one(), dqkv, k);
        }
    }
    Ok(())
}
