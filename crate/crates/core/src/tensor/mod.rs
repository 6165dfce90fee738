//! Dense, owned, C-ordered tensors of rank 1 to 6.
//!
//! Axis order is fixed across the crate: batch `N`, channel `C`, spatial
//! `X, Y, Z`, temporal `T`. Lower-rank tensors drop axes from that list
//! (a 3D feature map is `[N, C, X, Y, Z]`, a classifier output is `[N, 2]`,
//! a scalar loss is `[1]`).
//!
//! Tensors never alias. Every operation returns a fresh tensor and leaves its
//! inputs untouched.

mod ops;
mod real;
mod rng;

use std::fmt;

pub use ops::{matmul_naive, Reduction};
pub(crate) use ops::{gemm, Transpose};
pub use real::{DType, Real};
pub use rng::{Rng, RngState, RNG_ALGORITHM};

use crate::error::{Error, Result};

/// Maximum supported rank (`N, C, X, Y, Z, T`).
pub const MAX_RANK: usize = 6;

/// Validated list of extents: rank 1..=6, every extent at least 1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::shape(format!(
                "rank must be in 1..={MAX_RANK}, got {dims:?}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in {dims:?}")));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn from_data(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape} needs {} elements, buffer has {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f` at every flat (C-order) index.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel()).map(f).collect();
        Ok(Tensor { shape, data })
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Copy of the flat C-order buffer.
    pub fn to_buffer(&self) -> Vec<T> {
        self.data.clone()
    }

    fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.rank() {
            return Err(Error::shape(format!(
                "index {index:?} has wrong rank for shape {}",
                self.shape
            )));
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(self.dims()) {
            if i >= d {
                return Err(Error::shape(format!(
                    "index {index:?} out of bounds for shape {}",
                    self.shape
                )));
            }
            flat = flat * d + i;
        }
        Ok(flat)
    }

    pub fn at(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.flat_index(index)?])
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{} ", T::DTYPE, self.shape)?;
        let head: Vec<String> = self
            .data
            .iter()
            .take(SHOWN)
            .map(|v| format!("{v}"))
            .collect();
        if self.data.len() > SHOWN {
            write!(f, "[{}, ...]", head.join(", "))
        } else {
            write!(f, "[{}]", head.join(", "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_full() {
        let z = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert_eq!(z.numel(), 6);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let f = Tensor::<f32>::full(&[1], 2.5).unwrap();
        assert_eq!(f.data(), &[2.5]);
    }

    #[test]
    fn from_data_is_c_order() {
        let t = Tensor::<f64>::from_data(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(&[1, 0]).unwrap(), 3.0);
        assert_eq!(t.shape().strides(), vec![2, 1]);
    }

    #[test]
    fn construction_errors() {
        assert!(Tensor::<f64>::from_data(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f64>::zeros(&[]).is_err());
        assert!(Tensor::<f64>::zeros(&[1; 7]).is_err());
        let t = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        assert!(t.at(&[2, 0]).is_err());
        assert!(t.reshape(&[3]).is_err());
    }

    #[test]
    fn strides_six_axes() {
        let s = Shape::new(vec![2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(s.strides(), vec![2520, 840, 210, 42, 7, 1]);
    }
}
