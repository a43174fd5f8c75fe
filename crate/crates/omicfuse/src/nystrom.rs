//! Nystrom approximation of softmax attention.
//!
//! The full `T x T` attention kernel is replaced by three skinny kernels
//! against `m` landmark tokens (segment means over the sequence) and the
//! pseudo-inverse of the `m x m` landmark-landmark kernel:
//!
//! `softmax(Q K̃ᵀ/sqrt(d_h)) · pinv(softmax(Q̃ K̃ᵀ/sqrt(d_h))) · softmax(Q̃ Kᵀ/sqrt(d_h)) · V`
//!
//! The pseudo-inverse is computed with the Newton–Schulz iteration so the
//! whole pipeline stays differentiable.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::DiffTensor;

/// Contiguous segment boundaries for `m` landmarks over `t` tokens: the
/// first `t % m` segments are one token longer.
pub fn segment_bounds(t: usize, m: usize) -> Vec<(usize, usize)> {
    debug_assert!(m >= 1 && m <= t);
    let base = t / m;
    let extra = t % m;
    let mut bounds = Vec::with_capacity(m);
    let mut start = 0;
    for j in 0..m {
        let len = base + usize::from(j < extra);
        bounds.push((start, len));
        start += len;
    }
    bounds
}

/// Landmarks of `x [T x d]`: mean of each contiguous segment. Requests for
/// more landmarks than tokens clamp to `T` with a warning (tiny slides).
pub fn landmarks(x: &DiffTensor, m: usize) -> Result<DiffTensor> {
    let (t, d) = x.dims2()?;
    if m < 1 {
        return Err(Error::config("landmark count must be >= 1".to_string()));
    }
    let m_eff = effective_landmarks(t, m);
    let mut out = vec![0.0; m_eff * d];
    for (j, &(start, len)) in segment_bounds(t, m_eff).iter().enumerate() {
        for i in start..start + len {
            for c in 0..d {
                out[j * d + c] += x.data()[i * d + c];
            }
        }
        for c in 0..d {
            out[j * d + c] /= len as f64;
        }
    }
    DiffTensor::from_vec(&[m_eff, d], out)
}

fn effective_landmarks(t: usize, m: usize) -> usize {
    if m > t {
        log::warn!("landmark count {m} exceeds {t} tokens; clamping to {t}");
        t
    } else {
        m
    }
}

/// Tape version of [`landmarks`], differentiable through the segment means.
pub fn landmarks_on_tape(tape: &mut Tape, x: TensorId, m: usize) -> Result<TensorId> {
    let (t, _) = tape.value(x).dims2()?;
    if m < 1 {
        return Err(Error::config("landmark count must be >= 1".to_string()));
    }
    let m_eff = effective_landmarks(t, m);
    let mut rows = Vec::with_capacity(m_eff);
    for (start, len) in segment_bounds(t, m_eff) {
        let seg = tape.slice_rows(x, start, len)?;
        rows.push(tape.mean_axis0(seg)?);
    }
    tape.concat_rows(&rows)
}

/// Moore–Penrose approximation by Newton–Schulz:
/// `Z_0 = Aᵀ / (‖A‖₁ ‖A‖∞)`, `Z_{k+1} = 2 Z_k − Z_k A Z_k`.
/// Differentiable end to end, including the norm scaling.
pub fn pinv_newton_schulz(tape: &mut Tape, a: TensorId, iters: usize) -> Result<TensorId> {
    let (n, m) = tape.value(a).dims2()?;
    if n != m {
        return Err(Error::ShapeMismatch {
            op: "pinv_newton_schulz",
            lhs: vec![n, m],
            rhs: vec![m, m],
        });
    }
    if !tape.value(a).is_finite() {
        return Err(Error::numeric("pinv_newton_schulz", "non-finite input"));
    }
    let abs_a = tape.abs(a);
    let col_sums = tape.sum_axis0(abs_a)?;
    let row_sums = tape.sum_axis1(abs_a)?;
    let norm1 = tape.max_all(col_sums);
    let norm_inf = tape.max_all(row_sums);
    let prod = tape.mul_elem(norm1, norm_inf)?;
    let inv_scale = tape.recip(prod)?;
    let at = tape.transpose(a)?;
    let mut z = tape.mul_scalar(at, inv_scale)?;
    for k in 0..iters {
        let az = tape.matmul(a, z)?;
        let zaz = tape.matmul(z, az)?;
        let two_z = tape.scale(z, 2.0);
        z = tape.sub(two_z, zaz)?;
        if !tape.value(z).is_finite() {
            return Err(Error::numeric(
                "pinv_newton_schulz",
                format!("non-finite iterate at iteration {k}"),
            ));
        }
    }
    Ok(z)
}

/// Single-head Nystrom attention on `q, k, v [T x d_h]`.
pub fn nystrom_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    m: usize,
    pinv_iters: usize,
) -> Result<TensorId> {
    let (_, dh) = tape.value(q).dims2()?;
    let scale = 1.0 / (dh as f64).sqrt();
    let q_land = landmarks_on_tape(tape, q, m)?;
    let k_land = landmarks_on_tape(tape, k, m)?;

    let k_land_t = tape.transpose(k_land)?;
    let f_scores = tape.matmul(q, k_land_t)?;
    let f_scaled = tape.scale(f_scores, scale);
    let f_kernel = tape.softmax_rows(f_scaled)?; // T x m

    let a_scores = tape.matmul(q_land, k_land_t)?;
    let a_scaled = tape.scale(a_scores, scale);
    let a_kernel = tape.softmax_rows(a_scaled)?; // m x m

    let k_t = tape.transpose(k)?;
    let b_scores = tape.matmul(q_land, k_t)?;
    let b_scaled = tape.scale(b_scores, scale);
    let b_kernel = tape.softmax_rows(b_scaled)?; // m x T

    let a_pinv = pinv_newton_schulz(tape, a_kernel, pinv_iters)?;
    let bv = tape.matmul(b_kernel, v)?; // m x d_h
    let fa = tape.matmul(f_kernel, a_pinv)?; // T x m
    tape.matmul(fa, bv)
}

/// Multi-head wrapper: slice `d` into `heads` blocks, run
/// [`nystrom_attention`] per head, concatenate.
pub fn nystrom_multi_head_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    heads: usize,
    m: usize,
    pinv_iters: usize,
) -> Result<TensorId> {
    let (_, d) = tape.value(q).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "attention width {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        outs.push(nystrom_attention(tape, qh, kh, vh, m, pinv_iters)?);
    }
    tape.concat_cols(&outs)
}
