//! Layer building blocks shared by the target and the drafters.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

pub const NORM_EPS: f64 = 1e-6;

/// `x · wᵀ` for a weight stored `[out, in]`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var) -> Result<Var> {
    tape.matmul_nt(x, w)
}

/// RMS normalisation over the last axis followed by an elementwise gain.
pub fn rms_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var) -> Result<Var> {
    let width = tape.value(x).cols();
    let n = tape.rms_norm(x, width, T::of(NORM_EPS))?;
    tape.mul_row(n, gain)
}

/// Per-head RMS normalisation with a gain shared by all heads.
pub fn head_rms_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, head_dim: usize, gain: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let rows = tape.value(x).len() / head_dim;
    let flat = tape.reshape(x, &[rows, head_dim])?;
    let n = tape.rms_norm(flat, head_dim, T::of(NORM_EPS))?;
    let g = tape.mul_row(n, gain)?;
    tape.reshape(g, &shape)
}

/// `w_down · silu(w_up · x)`.
pub fn mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let h = linear(tape, x, w_up)?;
    let h = tape.silu(h)?;
    linear(tape, h, w_down)
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `[n, heads·head_dim]`, `k` and `v` are `[m, heads·head_dim]`, and
/// `mask` is the row-major `[n × m]` visibility pattern shared by all heads.
/// Query head `h` reads key/value head `h`. Rows with nothing visible yield
/// zeros.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    head_dim: usize,
    mask: &[bool],
) -> Result<Var> {
    let scale = T::one() / T::of(head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale)?;
        let p = tape.softmax_masked(s, Some(mask))?;
        outs.push(tape.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Causal visibility for `n` new rows appended after `past` cached rows.
pub fn causal_mask(past: usize, n: usize) -> Vec<bool> {
    let m = past + n;
    let mut mask = vec![false; n * m];
    for r in 0..n {
        mask[r * m..r * m + past + r + 1].fill(true);
    }
    mask
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Log-softmax of one row.
pub fn log_softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    xs.iter().map(|&x| x - lse).collect()
}
