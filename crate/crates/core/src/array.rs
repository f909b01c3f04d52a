use crate::error::{contract_err, shape_err, Result, TensorError};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Dense row-major host array. Plain data, no graph attachment; the value
/// type that crosses the boundary between the autodiff graph and the rest
/// of the program.
#[derive(Clone, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return shape_err(format!(
                "array data length {} does not match shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Array {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel(shape);
        Array {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    /// Standard-normal fill, elements drawn in row-major order.
    pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Self {
        let n = numel(shape);
        Array {
            shape: shape.to_vec(),
            data: (0..n).map(|_| T::from_f64(rng.sample(StandardNormal))).collect(),
        }
    }

    pub fn rand_uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Self {
        let n = numel(shape);
        Array {
            shape: shape.to_vec(),
            data: (0..n)
                .map(|_| T::from_f64(rng.gen_range(lo..hi)))
                .collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<T>) {
        (self.shape, self.data)
    }

    /// Single-element extraction; errors when the array is not one element.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return contract_err(format!(
                "item() on array of shape {:?}",
                self.shape
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return shape_err(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let strides = strides_for(&self.shape);
        index
            .iter()
            .zip(strides.iter())
            .map(|(&i, &s)| {
                assert!(i < numel(&self.shape).max(1), "index out of range");
                i * s
            })
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.into_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Array<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.into_f64() - b.into_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(context.to_string()))
        }
    }
}

impl<T: Scalar> fmt::Debug for Array<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}[", self.shape)?;
        let show = self.data.len().min(8);
        for (i, v) in self.data[..show].iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > show {
            write!(f, ", ..")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_for(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_for(&[5]), vec![1]);
        assert!(strides_for(&[]).is_empty());
    }

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Array::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn indexing_round_trips() {
        let mut a = Array::<f64>::zeros(&[2, 3]);
        a.set(&[1, 2], 7.0);
        assert_eq!(a.get(&[1, 2]), 7.0);
        assert_eq!(a.data()[5], 7.0);
    }

    #[test]
    fn reshape_preserves_data() {
        let a = Array::<f32>::from_fn(&[2, 3], |i| i as f32);
        let b = a.clone().reshaped(&[3, 2]).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.reshaped(&[4, 2]).is_err());
    }
}
