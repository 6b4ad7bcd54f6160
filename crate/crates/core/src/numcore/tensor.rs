use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type of a [`Tape`](super::Tape).
///
/// Parameters and datasets are always stored as `f32`. Training runs the tape
/// in `f32`; `f64` exists so finite-difference checks can run through the very
/// same kernels without being swamped by rounding noise.
pub trait Real:
    num_traits::Float
    + Copy
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    fn of(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_single(self) -> f32;
    fn to_double(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_single(self) -> f32 {
        self
    }
    #[inline]
    fn to_double(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to_single(self) -> f32 {
        self as f32
    }
    #[inline]
    fn to_double(self) -> f64 {
        self
    }
}

/// Dense row-major `f32` array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::full(vec![1], value)
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("1-D shape always matches")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("Tensor::set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("Tensor::reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_leading(&self, start: usize, len: usize) -> Result<Tensor> {
        let lead = *self.shape.first().unwrap_or(&0);
        if start + len > lead {
            return Err(Error::shape("slice_leading", &self.shape, &[start + len]));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor::new(shape, self.data[start * stride..(start + len) * stride].to_vec())
    }

    /// Concatenates along the leading axis.
    pub fn concat_leading(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat_leading of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape("concat_leading", &first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Tensor::new(shape, data)
    }
}

// Kernels shared by the tape. All reductions run in a fixed sequential order
// so results are bitwise reproducible.

const LANES: usize = 8;

/// `c[m,n] += a[m,k] * b[k,n]`
///
/// Each output element accumulates over `k` in increasing order.
pub(crate) fn matmul_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let full = n / LANES * LANES;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j0 in (0..full).step_by(LANES) {
            let mut acc = [T::zero(); LANES];
            acc.copy_from_slice(&crow[j0..j0 + LANES]);
            for (p, &av) in arow.iter().enumerate() {
                let bv = &b[p * n + j0..p * n + j0 + LANES];
                for l in 0..LANES {
                    acc[l] += av * bv[l];
                }
            }
            crow[j0..j0 + LANES].copy_from_slice(&acc);
        }
        for j in full..n {
            let mut acc = crow[j];
            for (p, &av) in arow.iter().enumerate() {
                acc += av * b[p * n + j];
            }
            crow[j] = acc;
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn matmul_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_nn(a, &bt, c, m, k, n);
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
///
/// Each output element accumulates over `m` in increasing order.
pub(crate) fn matmul_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let full = n / LANES * LANES;
    for p in 0..k {
        let crow = &mut c[p * n..(p + 1) * n];
        for j0 in (0..full).step_by(LANES) {
            let mut acc = [T::zero(); LANES];
            acc.copy_from_slice(&crow[j0..j0 + LANES]);
            for i in 0..m {
                let av = a[i * k + p];
                let bv = &b[i * n + j0..i * n + j0 + LANES];
                for l in 0..LANES {
                    acc[l] += av * bv[l];
                }
            }
            crow[j0..j0 + LANES].copy_from_slice(&acc);
        }
        for j in full..n {
            let mut acc = crow[j];
            for i in 0..m {
                acc += a[i * k + p] * b[i * n + j];
            }
            crow[j] = acc;
        }
    }
}

/// Dot product with four interleaved accumulators, combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = T::zero();
    for o in chunks * 4..a.len() {
        tail += a[o] * b[o];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax of a plain tensor along `axis`.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(Error::shape("softmax axis", shape, &[axis]));
    }
    if !logits.is_finite() {
        return Err(Error::NumericDomain {
            op: "softmax",
            detail: "input contains NaN or Inf".into(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = logits.clone().with_grad(false);
    let data = out.data_mut();
    let mut row = vec![0.0f32; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, r) in row.iter_mut().enumerate() {
                *r = data[(o * len + j) * inner + i];
            }
            softmax_row(&mut row);
            for (j, r) in row.iter().enumerate() {
                data[(o * len + j) * inner + i] = *r;
            }
        }
    }
    Ok(out)
}
