//! Row-major dense kernels.
//!
//! Every output element is accumulated in a fixed order that depends only on
//! the reduction index, never on how many rows are processed together. Batched
//! and one-row-at-a-time evaluation therefore agree bit for bit, which the
//! speculative decoder relies on for exact losslessness.

use crate::scalar::Scalar;

/// Dot product with four interleaved accumulators.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// `out[m×n] = a[m×k] · b[k×n]`, accumulated sequentially over `k`.
///
/// Exact zeros in `a` leave the partial sums untouched, so masked attention
/// probabilities do not perturb the result.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Softmax over each row of `x[rows×cols]`; masked-out entries (false) are
/// exactly zero and do not take part in the max or the normaliser.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize, mask: Option<&[bool]>) -> Vec<T> {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let visible = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let mut max = T::neg_infinity();
        for (j, &v) in xr.iter().enumerate() {
            if visible(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut sum = T::zero();
        for j in 0..cols {
            if visible(j) {
                let e = (xr[j] - max).exp();
                or[j] = e;
                sum += e;
            }
        }
        let inv = T::one() / sum;
        for v in or.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Rotates consecutive `head_dim` chunks of each row by their row position.
///
/// Pairs are `(i, i + head_dim/2)`; pair `i` turns by
/// `position · base^(-2i/head_dim)`. `inverse` rotates the other way, which is
/// the transpose used by the backward pass.
pub fn rope_rows<T: Scalar>(
    x: &[T],
    width: usize,
    head_dim: usize,
    positions: &[usize],
    base: f64,
    inverse: bool,
) -> Vec<T> {
    let half = head_dim / 2;
    let mut out = x.to_vec();
    let sign = if inverse { -1.0 } else { 1.0 };
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            let (s, c) = (T::of(sign * angle.sin()), T::of(angle.cos()));
            for h in 0..width / head_dim {
                let o = r * width + h * head_dim;
                let (a, b) = (x[o + i], x[o + i + half]);
                out[o + i] = a * c - b * s;
                out[o + i + half] = a * s + b * c;
            }
        }
    }
    out
}
