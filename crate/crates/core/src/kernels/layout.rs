//! Data-movement kernels: permute, axis slice, concat, row gather/scatter.

use crate::array::{numel, strides_for};
use crate::scalar::Scalar;

/// Permuted copy: out has shape `perm(shape)` with
/// out[i0,..] = in[i_perm[0], ..]. `perm[d]` names the input axis that
/// becomes output axis d.
pub fn permute_copy<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides_for(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let read_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(&out_shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(x[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += read_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= read_strides[d] * out_shape[d];
        }
    }
    out
}

pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (d, &p) in perm.iter().enumerate() {
        inv[p] = d;
    }
    inv
}

/// Contiguous copy of `len` positions starting at `start` along `axis`.
pub fn slice_axis_copy<T: Scalar>(
    x: &[T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<T> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let axis_len = shape[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * axis_len + start) * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

/// Scatter-add of a slice gradient back into the full-shape buffer.
pub fn slice_axis_bwd<T: Scalar>(
    g: &[T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
    dx: &mut [T],
) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let axis_len = shape[axis];
    for o in 0..outer {
        let base = (o * axis_len + start) * inner;
        let src = &g[o * len * inner..(o + 1) * len * inner];
        for (d, &v) in dx[base..base + len * inner].iter_mut().zip(src.iter()) {
            *d += v;
        }
    }
}

/// Concatenate along `axis`; all inputs share every other dimension.
pub fn concat_copy<T: Scalar>(parts: &[(&[T], &[usize])], axis: usize, out_shape: &[usize]) -> Vec<T> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(numel(out_shape));
    for o in 0..outer {
        for (data, shape) in parts {
            let len = shape[axis] * inner;
            out.extend_from_slice(&data[o * len..(o + 1) * len]);
        }
    }
    out
}

/// Split a concat gradient back into per-part buffers.
pub fn concat_bwd<T: Scalar>(g: &[T], part_shapes: &[&[usize]], axis: usize) -> Vec<Vec<T>> {
    let outer: usize = part_shapes[0][..axis].iter().product();
    let inner: usize = part_shapes[0][axis + 1..].iter().product();
    let mut outs: Vec<Vec<T>> = part_shapes
        .iter()
        .map(|s| Vec::with_capacity(numel(s)))
        .collect();
    let mut cursor = 0usize;
    for _ in 0..outer {
        for (pi, shape) in part_shapes.iter().enumerate() {
            let len = shape[axis] * inner;
            outs[pi].extend_from_slice(&g[cursor..cursor + len]);
            cursor += len;
        }
    }
    outs
}

/// out[i, :] = table[ids[i], :]
pub fn gather_rows<T: Scalar>(table: &[T], d: usize, ids: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        out.extend_from_slice(&table[id * d..(id + 1) * d]);
    }
    out
}

/// Row-wise scatter-add, sequential in `ids` order so repeated indices
/// accumulate deterministically.
pub fn scatter_rows_add<T: Scalar>(g: &[T], d: usize, ids: &[usize], dtable: &mut [T]) {
    for (i, &id) in ids.iter().enumerate() {
        let src = &g[i * d..(i + 1) * d];
        for (dst, &v) in dtable[id * d..(id + 1) * d].iter_mut().zip(src.iter()) {
            *dst += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let x: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let out = permute_copy(&x, &[2, 3], &[1, 0]);
        assert_eq!(out, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let perm = [2, 0, 1];
        let mid = permute_copy(&x, &[2, 3, 4], &perm);
        let back = permute_copy(&mid, &[4, 2, 3], &invert_perm(&perm));
        assert_eq!(back, x);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let a = slice_axis_copy(&x, &[2, 3, 2], 1, 0, 1);
        let b = slice_axis_copy(&x, &[2, 3, 2], 1, 1, 2);
        let joined = concat_copy(&[(&a, &[2usize, 1, 2][..]), (&b, &[2usize, 2, 2][..])], 1, &[2, 3, 2]);
        assert_eq!(joined, x);
    }

    #[test]
    fn gather_scatter_accumulates() {
        let table: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let out = gather_rows(&table, 2, &[3, 0, 3]);
        assert_eq!(out, vec![6.0, 7.0, 0.0, 1.0, 6.0, 7.0]);
        let mut dt = vec![0.0f64; 8];
        scatter_rows_add(&out, 2, &[3, 0, 3], &mut dt);
        assert_eq!(dt, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 12.0, 14.0]);
    }
}
