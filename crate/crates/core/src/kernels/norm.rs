//! Normalization and activation kernels: softmax, group normalization,
//! SiLU, row L2 normalization, softmax cross-entropy.

use crate::parallel::for_each_chunk_mut;
use crate::scalar::Scalar;

/// Max-subtracted softmax along `axis`. Rows are the (outer, inner) index
/// combinations over the remaining axes.
pub fn softmax_fwd<T: Scalar>(x: &[T], shape: &[usize], axis: usize, out: &mut [T]) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    out.copy_from_slice(x);
    if inner == 1 {
        for_each_chunk_mut(out, axis_len, |_, row| softmax_row(row, 1));
    } else {
        for_each_chunk_mut(out, axis_len * inner, |_, block| {
            for i in 0..inner {
                softmax_row(&mut block[i..], inner);
            }
        });
    }
}

fn softmax_row<T: Scalar>(row: &mut [T], stride: usize) {
    let mut max = T::neg_infinity();
    let mut i = 0;
    while i < row.len() {
        if row[i] > max {
            max = row[i];
        }
        i += stride;
    }
    let mut sum = T::zero();
    let mut i = 0;
    while i < row.len() {
        let e = (row[i] - max).exp();
        row[i] = e;
        sum += e;
        i += stride;
    }
    let inv = T::one() / sum;
    let mut i = 0;
    while i < row.len() {
        row[i] *= inv;
        i += stride;
    }
}

/// dx = y * (g - sum(g * y)) per softmax row; `y` is the forward output.
pub fn softmax_bwd<T: Scalar>(g: &[T], y: &[T], shape: &[usize], axis: usize, dx: &mut [T]) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    for_each_chunk_mut(dx, axis_len * inner, |block_idx, dx_block| {
        let base = block_idx * axis_len * inner;
        for i in 0..inner {
            let mut dot = T::zero();
            for a in 0..axis_len {
                let j = base + a * inner + i;
                dot += g[j] * y[j];
            }
            for a in 0..axis_len {
                let j = base + a * inner + i;
                dx_block[a * inner + i] = y[j] * (g[j] - dot);
            }
        }
    });
}

/// Group normalization over [B, C, spatial...]: per (batch, group) slice,
/// subtract the mean and scale by 1/sqrt(var + eps), then apply the
/// per-channel affine. Returns (mean, inv_std) per slice for the backward
/// pass, laid out [B * groups].
pub fn group_norm_fwd<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let cg = channels / groups;
    let slice_len = cg * spatial;
    let mut mean = vec![T::zero(); batch * groups];
    let mut inv_std = vec![T::zero(); batch * groups];
    {
        let stats: Vec<(usize, T, T)> = (0..batch * groups)
            .map(|s| {
                let base = s * slice_len;
                let mut sum = T::zero();
                for &v in &x[base..base + slice_len] {
                    sum += v;
                }
                let m = sum / T::from_f64(slice_len as f64);
                let mut var = T::zero();
                for &v in &x[base..base + slice_len] {
                    let d = v - m;
                    var += d * d;
                }
                var = var / T::from_f64(slice_len as f64);
                (s, m, T::one() / (var + T::from_f64(eps)).sqrt())
            })
            .collect();
        for (s, m, istd) in stats {
            mean[s] = m;
            inv_std[s] = istd;
        }
    }
    for_each_chunk_mut(out, slice_len, |s, out_slice| {
        let base = s * slice_len;
        let group = s % groups;
        let m = mean[s];
        let istd = inv_std[s];
        for c_l in 0..cg {
            let c = group * cg + c_l;
            let ga = gamma[c];
            let be = beta[c];
            let row = &x[base + c_l * spatial..base + (c_l + 1) * spatial];
            let out_row = &mut out_slice[c_l * spatial..(c_l + 1) * spatial];
            for (o, &v) in out_row.iter_mut().zip(row.iter()) {
                *o = (v - m) * istd * ga + be;
            }
        }
    });
    (mean, inv_std)
}

/// Gradients for group_norm_fwd. dgamma/dbeta accumulate over batches in
/// batch order. Any of the output slices may be empty to skip that input.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_bwd<T: Scalar>(
    g: &[T],
    x: &[T],
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let cg = channels / groups;
    let slice_len = cg * spatial;
    if !dx.is_empty() {
        for_each_chunk_mut(dx, slice_len, |s, dx_slice| {
            let base = s * slice_len;
            let group = s % groups;
            let m = mean[s];
            let istd = inv_std[s];
            let n = T::from_f64(slice_len as f64);
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for c_l in 0..cg {
                let ga = gamma[group * cg + c_l];
                for i in 0..spatial {
                    let j = base + c_l * spatial + i;
                    let xhat = (x[j] - m) * istd;
                    let dxhat = g[j] * ga;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let mean_dxhat = sum_dxhat / n;
            let mean_dxhat_xhat = sum_dxhat_xhat / n;
            for c_l in 0..cg {
                let ga = gamma[group * cg + c_l];
                for i in 0..spatial {
                    let j = base + c_l * spatial + i;
                    let xhat = (x[j] - m) * istd;
                    let dxhat = g[j] * ga;
                    dx_slice[c_l * spatial + i] =
                        istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        });
    }
    if !dgamma.is_empty() {
        for_each_chunk_mut(dgamma, 1, |c, slot| {
            let group = c / cg;
            let c_l = c % cg;
            let mut acc = T::zero();
            for b in 0..batch {
                let s = b * groups + group;
                let base = s * slice_len + c_l * spatial;
                let m = mean[s];
                let istd = inv_std[s];
                for i in 0..spatial {
                    acc += g[base + i] * (x[base + i] - m) * istd;
                }
            }
            slot[0] = acc;
        });
    }
    if !dbeta.is_empty() {
        for_each_chunk_mut(dbeta, 1, |c, slot| {
            let group = c / cg;
            let c_l = c % cg;
            let mut acc = T::zero();
            for b in 0..batch {
                let base = (b * groups + group) * slice_len + c_l * spatial;
                for i in 0..spatial {
                    acc += g[base + i];
                }
            }
            slot[0] = acc;
        });
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu_fwd<T: Scalar>(x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = v * sigmoid(v);
    }
}

pub fn silu_bwd<T: Scalar>(g: &[T], x: &[T], dx: &mut [T]) {
    for ((d, &gv), &v) in dx.iter_mut().zip(g.iter()).zip(x.iter()) {
        let s = sigmoid(v);
        *d = gv * s * (T::one() + v * (T::one() - s));
    }
}

/// Normalize each row of an [N, D] matrix to unit L2 norm. Returns the
/// per-row 1/sqrt(sum sq + eps) factors.
pub fn l2_normalize_fwd<T: Scalar>(x: &[T], rows: usize, d: usize, eps: f64, out: &mut [T]) -> Vec<T> {
    let mut inv = vec![T::zero(); rows];
    for (r, slot) in inv.iter_mut().enumerate() {
        let row = &x[r * d..(r + 1) * d];
        let mut sq = T::zero();
        for &v in row {
            sq += v * v;
        }
        *slot = T::one() / (sq + T::from_f64(eps)).sqrt();
        for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row.iter()) {
            *o = v * *slot;
        }
    }
    inv
}

pub fn l2_normalize_bwd<T: Scalar>(g: &[T], y: &[T], inv: &[T], rows: usize, d: usize, dx: &mut [T]) {
    for r in 0..rows {
        let g_row = &g[r * d..(r + 1) * d];
        let y_row = &y[r * d..(r + 1) * d];
        let mut dot = T::zero();
        for (&gv, &yv) in g_row.iter().zip(y_row.iter()) {
            dot += gv * yv;
        }
        for ((dst, &gv), &yv) in dx[r * d..(r + 1) * d].iter_mut().zip(g_row).zip(y_row) {
            *dst = (gv - yv * dot) * inv[r];
        }
    }
}

/// Mean softmax cross-entropy over rows of [N, K] logits. Returns the loss
/// and the softmax probabilities for the backward pass.
pub fn cross_entropy_fwd<T: Scalar>(logits: &[T], rows: usize, k: usize, targets: &[usize]) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); rows * k];
    let mut loss = T::zero();
    for r in 0..rows {
        let row = &logits[r * k..(r + 1) * k];
        let mut max = T::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        loss += lse - row[targets[r]];
        for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row.iter()) {
            *p = (v - lse).exp();
        }
    }
    (loss / T::from_f64(rows as f64), probs)
}

pub fn cross_entropy_bwd<T: Scalar>(
    g: T,
    probs: &[T],
    rows: usize,
    k: usize,
    targets: &[usize],
    dlogits: &mut [T],
) {
    let scale = g / T::from_f64(rows as f64);
    dlogits.copy_from_slice(probs);
    for r in 0..rows {
        dlogits[r * k + targets[r]] -= T::one();
        for v in &mut dlogits[r * k..(r + 1) * k] {
            *v *= scale;
        }
    }
}
