//! Multi-head attention plumbing shared by the text encoder, the denoising
//! networks, and the cross-stream exchange, plus the low-rank adapter
//! mechanism that makes the frozen content weights tunable.
//!
//! A projection named `p` stores its base weight at `p.w` as `[d_in,
//! d_out]`. If adapters are attached, `p.a` is `[d_in, rank]` and `p.b` is
//! `[d_out, rank]`, and the effective weight is `W + lambda * A * B^T`.
//! The adapter path is applied factored (never materializing the merged
//! weight) and is skipped entirely at `lambda = 0`, so the base output is
//! reproduced bit for bit.

use crate::error::{config_err, Result};
use crate::params::Fwd;
use dsdn_core::graph::Tensor;
use dsdn_core::{Array, Scalar};

/// Merged-weight arithmetic on plain arrays: `W + lambda * A * B^T`.
/// The in-graph path below computes the same map without forming this
/// product; this form exists for weight inspection and tests.
pub fn apply_adapter<T: Scalar>(
    w: &Array<T>,
    a: &Array<T>,
    b: &Array<T>,
    lambda: f64,
) -> Result<Array<T>> {
    let (m, n) = match *w.shape() {
        [m, n] => (m, n),
        _ => return config_err(format!("adapter base must be 2-D, got {:?}", w.shape())),
    };
    let rank = match (a.shape(), b.shape()) {
        ([am, r], [bn, r2]) if *am == m && *bn == n && r == r2 => *r,
        _ => {
            return config_err(format!(
                "adapter factors {:?}/{:?} do not match base {:?}",
                a.shape(),
                b.shape(),
                w.shape()
            ))
        }
    };
    if rank >= m.min(n) {
        return config_err(format!("adapter rank {rank} must be below min({m}, {n})"));
    }
    let lam = T::from_f64(lambda);
    let mut out = w.clone();
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for r in 0..rank {
                acc += a.data()[i * rank + r] * b.data()[j * rank + r];
            }
            let v = out.data()[i * n + j] + lam * acc;
            out.data_mut()[i * n + j] = v;
        }
    }
    Ok(out)
}

/// `x @ W` for `x [N, d_in]`, with the factored adapter update added when
/// `lambda` is nonzero and `{name}.a` exists in the store.
pub fn linear<T: Scalar>(
    fwd: &Fwd<T>,
    name: &str,
    x: &Tensor<T>,
    lambda: f64,
) -> Result<Tensor<T>> {
    let base = x.matmul(&fwd.p(&format!("{name}.w"))?)?;
    let a_name = format!("{name}.a");
    if lambda == 0.0 || !fwd.has(&a_name) {
        return Ok(base);
    }
    let a = fwd.p(&a_name)?;
    let bt = fwd.p(&format!("{name}.b"))?.permute(&[1, 0])?;
    let delta = x.matmul(&a)?.matmul(&bt)?.scale(T::from_f64(lambda));
    Ok(base.add(&delta)?)
}

/// `x @ W + b` for `x [N, d_in]` with `{name}.w` / `{name}.b`.
pub fn linear_bias<T: Scalar>(fwd: &Fwd<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(x.matmul(&fwd.p(&format!("{name}.w"))?)?
        .add(&fwd.p(&format!("{name}.b"))?)?)
}

/// Per-token layer norm over the feature axis of `[N, S, D]`, using the
/// affine pair `{name}.g` / `{name}.b`.
pub fn layer_norm<T: Scalar>(fwd: &Fwd<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    let [n, s, d] = shape[..] else {
        return config_err(format!("layer_norm expects [N, S, D], got {shape:?}"));
    };
    let flat = x.reshape(&[n * s, d, 1])?;
    let normed = flat.group_norm(
        &fwd.p(&format!("{name}.g"))?,
        &fwd.p(&format!("{name}.b"))?,
        1,
        1e-5,
    )?;
    Ok(normed.reshape(&[n, s, d])?)
}

/// Multi-head attention between token sequences.
///
/// `q_in` is `[N, Sq, Dq]`, `kv_in` is `[N, Sk, Dkv]`. Projection widths
/// come from the stored weights: `wq [Dq, D]`, `wk/wv [Dkv, D]`,
/// `wo [D, D_out]`, with `heads` dividing `D`. Scores are scaled by the
/// per-head width. `mask` is additive on scores, one row per batch entry
/// (`[N, Sk]`, typically 0 or a large negative number), applied before
/// softmax. `lambda` activates adapters on all four projections.
pub fn mha<T: Scalar>(
    fwd: &Fwd<T>,
    prefix: &str,
    q_in: &Tensor<T>,
    kv_in: &Tensor<T>,
    heads: usize,
    lambda: f64,
    mask: Option<&Array<T>>,
) -> Result<Tensor<T>> {
    let [n, sq, dq] = q_in.shape()[..] else {
        return config_err(format!("mha query must be [N, Sq, D], got {:?}", q_in.shape()));
    };
    let [nk, sk, dkv] = kv_in.shape()[..] else {
        return config_err(format!("mha kv must be [N, Sk, D], got {:?}", kv_in.shape()));
    };
    if nk != n {
        return config_err(format!("mha batch mismatch: {n} vs {nk}"));
    }
    let wq_shape = fwd.p(&format!("{prefix}.q.w"))?.shape();
    let d = wq_shape[1];
    if wq_shape[0] != dq {
        return config_err(format!(
            "mha query width {dq} does not match projection {wq_shape:?}"
        ));
    }
    if d % heads != 0 {
        return config_err(format!("mha width {d} not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let _ = dkv;

    let split = |t: &Tensor<T>, s: usize| -> Result<Tensor<T>> {
        Ok(t.reshape(&[n, s, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n * heads, s, dh])?)
    };
    let q2 = q_in.reshape(&[n * sq, dq])?;
    let kv2 = kv_in.reshape(&[n * sk, dkv])?;
    let q = split(&linear(fwd, &format!("{prefix}.q"), &q2, lambda)?.reshape(&[n, sq, d])?, sq)?;
    let k = split(&linear(fwd, &format!("{prefix}.k"), &kv2, lambda)?.reshape(&[n, sk, d])?, sk)?;
    let v = split(&linear(fwd, &format!("{prefix}.v"), &kv2, lambda)?.reshape(&[n, sk, d])?, sk)?;

    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut scores = q.matmul(&k.permute(&[0, 2, 1])?)?.scale(scale);
    if let Some(m) = mask {
        if m.shape() != [n, sk] {
            return config_err(format!(
                "mha mask must be [N, Sk] = [{n}, {sk}], got {:?}",
                m.shape()
            ));
        }
        // Expand to one row per (batch, head) pair; heads of one batch
        // entry are adjacent after the split above.
        let mut data = Vec::with_capacity(n * heads * sk);
        for b in 0..n {
            for _ in 0..heads {
                data.extend_from_slice(&m.data()[b * sk..(b + 1) * sk]);
            }
        }
        let mask3 = Array::new(vec![n * heads, 1, sk], data)?;
        scores = scores.add(&fwd.graph.constant(&mask3))?;
    }
    let attn = scores.softmax(2)?;
    let mixed = attn.matmul(&v)?;
    let merged = mixed
        .reshape(&[n, heads, sq, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n * sq, d])?;
    let out = linear(fwd, &format!("{prefix}.o"), &merged, lambda)?;
    let d_out = out.shape()[1];
    Ok(out.reshape(&[n, sq, d_out])?)
}
