//! Dense row-major arrays of up to four extents.
//!
//! The convention for 4-d arrays is (batch, channels, height, width); images
//! are (channels, height, width) and single-channel maps are (height, width).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape with 1 to 4 extents, all at least 1.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    dims: [usize; 4],
    ndim: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::config(format!(
                "shape must have 1..=4 extents, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("all extents must be >= 1: {dims:?}")));
        }
        let mut arr = [1usize; 4];
        arr[..dims.len()].copy_from_slice(dims);
        Ok(Shape {
            dims: arr,
            ndim: dims.len(),
        })
    }

    pub fn d1(a: usize) -> Self {
        Shape::new(&[a]).expect("nonzero extent")
    }
    pub fn d2(a: usize, b: usize) -> Self {
        Shape::new(&[a, b]).expect("nonzero extents")
    }
    pub fn d3(a: usize, b: usize, c: usize) -> Self {
        Shape::new(&[a, b, c]).expect("nonzero extents")
    }
    pub fn d4(a: usize, b: usize, c: usize, d: usize) -> Self {
        Shape::new(&[a, b, c, d]).expect("nonzero extents")
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }
    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }
    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    /// Extent at axis `i`, or 1 when the axis does not exist.
    pub fn at(&self, i: usize) -> usize {
        if i < self.ndim {
            self.dims[i]
        } else {
            1
        }
    }
}

impl std::fmt::Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

/// Contiguous row-major dense array.
#[derive(Clone, PartialEq)]
pub struct DenseArray<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> DenseArray<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::config(format!(
                "shape {shape} implies {} elements but data has {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(DenseArray { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        DenseArray {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        DenseArray {
            shape,
            data: vec![v; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..shape.len()).map(&mut f).collect();
        DenseArray { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data, new shape; lengths must agree.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::config(format!(
                "cannot reshape {} elements into {shape}",
                self.data.len()
            )));
        }
        Ok(DenseArray {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        DenseArray {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of_usize(self.data.len())
    }

    pub fn min_value(&self) -> T {
        self.data.iter().fold(T::infinity(), |a, &b| a.min(b))
    }

    pub fn max_value(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |a, &b| a.max(b))
    }

    /// Cast element type; used to run f32 pipelines through f64 oracles.
    pub fn cast<U: Scalar>(&self) -> DenseArray<U> {
        DenseArray {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for DenseArray<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DenseArray{}[{} elems]", self.shape, self.data.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_extent() {
        assert!(Shape::new(&[2, 0, 3]).is_err());
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[1, 2, 3, 4, 5]).is_err());
    }

    #[test]
    fn new_checks_length() {
        let s = Shape::d2(2, 3);
        assert!(DenseArray::new(s, vec![0.0f32; 6]).is_ok());
        assert!(DenseArray::new(s, vec![0.0f32; 5]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let a = DenseArray::<f32>::from_fn(Shape::d2(2, 3), |i| i as f32);
        let b = a.reshape(Shape::d3(3, 2, 1)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.reshape(Shape::d2(2, 2)).is_err());
    }
}
