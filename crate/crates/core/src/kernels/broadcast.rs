//! Right-aligned broadcasting for elementwise binary operations, numpy
//! rules: trailing dimensions must match or be 1.

use crate::array::{numel, strides_for};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return shape_err(format!("cannot broadcast {a:?} with {b:?}"));
        };
    }
    Ok(out)
}

/// Strides for reading an array of `shape` as if it had `out_shape`:
/// broadcast dimensions get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_for(shape);
    let offset = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}

/// Apply `f(a_elem, b_elem)` over the broadcast of the two inputs.
pub fn binary_map<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let n = numel(out_shape);
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f(a[ia], b[ib]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `grad` (of `grad_shape`) down to `target_shape` by collapsing the
/// dimensions that were broadcast on the forward pass. Summation runs in
/// row-major element order, so it is deterministic.
pub fn reduce_to_shape<T: Scalar>(
    grad: &[T],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Vec<T> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let st = broadcast_strides(target_shape, grad_shape);
    let rank = grad_shape.len();
    let mut out = vec![T::zero(); numel(target_shape)];
    let mut idx = vec![0usize; rank];
    let mut it = 0usize;
    for &g in grad {
        out[it] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            it += st[d];
            if idx[d] < grad_shape[d] {
                break;
            }
            idx[d] = 0;
            it -= st[d] * grad_shape[d];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_numpy_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[1], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn binary_map_broadcasts_rows() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [10.0f64, 20.0, 30.0];
        let out = binary_map(&a, &[2, 3], &b, &[3], &[2, 3], |x, y| x + y);
        assert_eq!(out, vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn reduce_collapses_broadcast_dims() {
        let g = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = reduce_to_shape(&g, &[2, 3], &[3]);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);
        let out = reduce_to_shape(&g, &[2, 3], &[2, 1]);
        assert_eq!(out, vec![6.0, 15.0]);
        let out = reduce_to_shape(&g, &[2, 3], &[1]);
        assert_eq!(out, vec![21.0]);
    }
}
