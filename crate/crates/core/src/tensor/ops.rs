//! Forward kernels on raw row-major buffers.
//!
//! The tape calls these for its forward values and reuses several of them in
//! backward rules. They are also usable directly on detached tensors.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `sqrt(2/pi)` for the tanh form of GELU.
const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// `out = a (m x k) * b (k x n)`.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// `out += a (m x k) * b (k x n)`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Transpose of an `r x c` matrix.
pub fn transpose<T: Scalar>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let x = x.f64();
    let inner = GELU_K * (x + GELU_C * x * x * x);
    T::of(0.5 * x * (1.0 + inner.tanh()))
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let x = x.f64();
    let inner = GELU_K * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    T::of(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
}

/// Row-wise softmax of an `r x c` matrix.
pub fn softmax_rows<T: Scalar>(x: &[T], c: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<T: Scalar>(x: &[T], c: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        row.iter_mut().for_each(|v| *v = *v - lse);
    }
    out
}

/// Normalized rows `(x - mean) / sqrt(var + eps)` and the per-row inverse std.
pub fn normalize_rows<T: Scalar>(x: &[T], c: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_c = T::of(1.0 / c as f64);
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rs = T::one() / (var + T::of(eps)).sqrt();
        rstd[r] = rs;
        for (o, &v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// Mean of the selected rows of an `r x c` matrix, as a `1 x c` row.
pub fn masked_mean_rows<T: Scalar>(x: &[T], c: usize, rows: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for &r in rows {
        for (o, &v) in out.iter_mut().zip(&x[r * c..(r + 1) * c]) {
            *o = *o + v;
        }
    }
    let inv = T::of(1.0 / rows.len() as f64);
    out.iter_mut().for_each(|v| *v = *v * inv);
    out
}

/// Per-row log of the summed softmax probability of each column group.
///
/// `groups[g]` lists the input columns merged into output column `g`. With
/// singleton groups this is the ordinary log-softmax.
pub fn grouped_log_softmax<T: Scalar>(x: &[T], c: usize, groups: &[Vec<usize>]) -> Vec<T> {
    let rows = x.len() / c;
    let g = groups.len();
    let mut out = vec![T::zero(); rows * g];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let total = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for (gi, cols) in groups.iter().enumerate() {
            let part = cols.iter().map(|&k| (row[k] - max).exp()).sum::<T>().ln();
            out[r * g + gi] = part - total;
        }
    }
    out
}

/// Argmax over the last axis of each row.
pub fn argmax_rows<T: Scalar>(x: &[T], c: usize) -> Vec<usize> {
    x.chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Checked matmul on 2-d tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Tensor::new(&[m, n], matmul_nn(a.data(), b.data(), m, k, n))
}

pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::new(x.shape(), softmax_rows(x.data(), x.cols())).unwrap()
}

pub(crate) fn dims2<T: Scalar>(t: &Tensor<T>, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Config(format!("{op}: expected a 2-d tensor, got {s:?}"))),
    }
}
