//! Dense row-major tensors with shared, immutable storage.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    Float
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// An immutable n-dimensional array. Cloning is cheap (the buffer is shared).
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a tensor from `f64` literals, converting to the working precision.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of_f64(v)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![v; numel]),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self {
            shape: vec![n, n],
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as a `[rows × last_dim]` matrix.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::of_f64(v.as_f64())).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
