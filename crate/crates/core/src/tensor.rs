//! Dense N-dimensional array in row-major order.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

/// Dense tensor. The data length always equals the product of the extents;
/// a scalar is represented by an empty shape and one element.
///
/// Values are immutable once a tensor is handed to the tape; the mutating
/// helpers exist for construction, the optimizer, and aggregation, all of
/// which operate on tensors they own.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor from external data, rejecting NaN/Inf and shape/data
    /// length disagreement.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(shape_err(
                "tensor",
                alloc::format!("shape {shape:?} holds {expect} values, got {}", data.len()),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(shape_err("tensor", alloc::format!("zero extent in {shape:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "tensor construction" });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values produced by the engine itself.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(|i| f(i)).collect() }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of elements.
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Element lookup by multi-index; test and debugging convenience.
    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &dim) in index.iter().zip(&self.shape) {
            debug_assert!(*i < dim);
            flat = flat * dim + i;
        }
        self.data[flat]
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                alloc::format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(
                "zip",
                alloc::format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    /// `self += other`, shapes must already agree (internal use).
    pub(crate) fn accumulate(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn iter(&self) -> core::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// Lossy precision change (used when casting datasets and checkpoints).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

/// Sums `terms` pairwise (binary tree over the given order).
///
/// Pairwise summation keeps rounding error low and, for `2^k` equal terms,
/// is exact: summing two equal values only increments the exponent.
pub fn pairwise_sum<T: Real>(terms: &mut Vec<Tensor<T>>) -> Result<Tensor<T>> {
    if terms.is_empty() {
        return Err(shape_err("pairwise_sum", "no terms"));
    }
    while terms.len() > 1 {
        let mut next = Vec::with_capacity(terms.len().div_ceil(2));
        let mut it = terms.drain(..);
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a.add(&b)?),
                None => next.push(a),
            }
        }
        drop(it);
        *terms = next;
    }
    Ok(terms.pop().expect("nonempty"))
}

/// Pairwise sum for plain scalars; same exactness argument as the tensor
/// version.
pub fn pairwise_sum_scalars<T: Real>(values: &[T]) -> T {
    match values.len() {
        0 => T::zero(),
        1 => values[0],
        n => {
            // Split at the largest power of two below n for a balanced tree.
            let split = if n.is_power_of_two() { n / 2 } else { n.next_power_of_two() / 2 };
            pairwise_sum_scalars(&values[..split]) + pairwise_sum_scalars(&values[split..])
        }
    }
}
