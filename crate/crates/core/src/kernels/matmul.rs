//! Batched matrix multiplication.
//!
//! Layouts are row-major. The parallel split is one output row per work
//! item; each row is accumulated left to right over k, so the floating
//! point order matches the sequential loop exactly.

use crate::parallel::for_each_chunk_mut;
use crate::scalar::Scalar;

/// out[bi] = a[bi] @ b[bi or 0], shapes a: [batch, m, k], b: [batch or 1, k, n].
/// `b_batched` selects whether b carries its own batch dimension.
pub fn matmul_fwd<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(out.len(), batch * m * n);
    for_each_chunk_mut(out, n, |row, out_row| {
        let bi = row / m;
        let i = row % m;
        let a_row = &a[(bi * m + i) * k..(bi * m + i) * k + k];
        let b_base = if b_batched { bi * k * n } else { 0 };
        for v in out_row.iter_mut() {
            *v = T::zero();
        }
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[b_base + p * n..b_base + p * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    });
}

/// dA = g @ b^T, one output row per work item, inner dot over n.
pub fn matmul_bwd_a<T: Scalar>(
    g: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    da: &mut [T],
) {
    debug_assert_eq!(g.len(), batch * m * n);
    for_each_chunk_mut(da, k, |row, da_row| {
        let bi = row / m;
        let i = row % m;
        let g_row = &g[(bi * m + i) * n..(bi * m + i) * n + n];
        let b_base = if b_batched { bi * k * n } else { 0 };
        for (p, dv) in da_row.iter_mut().enumerate() {
            let b_row = &b[b_base + p * n..b_base + p * n + n];
            let mut acc = T::zero();
            for (&gv, &bv) in g_row.iter().zip(b_row.iter()) {
                acc += gv * bv;
            }
            *dv = acc;
        }
    });
}

/// dB = a^T @ g. When b was shared across the batch (`b_batched` false)
/// the batch contributions accumulate sequentially in batch order.
pub fn matmul_bwd_b<T: Scalar>(
    a: &[T],
    g: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    db: &mut [T],
) {
    if b_batched {
        for_each_chunk_mut(db, k * n, |bi, db_block| {
            accumulate_atb(
                &a[bi * m * k..(bi + 1) * m * k],
                &g[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
                db_block,
            );
        });
    } else {
        for bi in 0..batch {
            accumulate_atb(
                &a[bi * m * k..(bi + 1) * m * k],
                &g[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
                db,
            );
        }
    }
}

fn accumulate_atb<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, db: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let db_row = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in db_row.iter_mut().zip(g_row.iter()) {
                *d += av * gv;
            }
        }
    }
}
