//! Minimal exact-gradient numerical kernel.
//!
//! Operations come in explicit forward/backward pairs — there is no tape or
//! graph. Values are stored in the element type `E` (f32 for training, f64
//! for gradient-check mode) and every reduction accumulates in f64, so
//! training math is "32-bit storage, 64-bit accumulation" and the check
//! mode is full double precision.

mod gradcheck;
mod ops;
mod optim;

pub use gradcheck::{central_diff, max_rel_error, rel_error};
pub use ops::{
    bilinear_resize, cross_entropy, distill_loss, grid_gather, grid_gather_backward,
    grid_scatter_mean, grid_scatter_mean_backward, l2_normalize, l2_normalize_backward, linear,
    linear_backward, relu, relu_backward, LinearGrads, ScatterMean,
};
pub use optim::{AdamWConfig, OptState};

use crate::error::{Error, Result};

/// Element type of the kernel: f32 in training, f64 in check mode.
pub trait Scalar:
    Copy + PartialEq + PartialOrd + std::fmt::Debug + Send + Sync + 'static
{
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Bit pattern used to put value multisets into a canonical order
    /// (order-independent summation).
    fn canonical_bits(self) -> u64;
    fn finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn canonical_bits(self) -> u64 {
        self.to_bits() as u64
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn canonical_bits(self) -> u64 {
        self.to_bits()
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![E::ZERO; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_f64s(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn zeros_like(other: &Tensor<E>) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Number of rows of a 2D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Number of columns of a 2D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[E] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [E] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> E {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.finite())
    }

    /// Element-wise `self += other` with f64 arithmetic; used for gradient
    /// accumulation across a batch.
    pub fn add_assign(&mut self, other: &Tensor<E>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add_assign shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = E::from_f64(a.to_f64() + b.to_f64());
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v = E::from_f64(v.to_f64() * factor);
        }
    }
}

/// Sequential f64 sum; the reduction primitive every op builds on.
pub fn sum_f64(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = 0.0;
    for v in values {
        acc += v;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_shape() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn add_assign_accumulates() {
        let mut a = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2], vec![0.5, -1.0]).unwrap();
        a.add_assign(&b).unwrap();
        assert_eq!(a.data(), &[1.5, 1.0]);
    }

    #[test]
    fn chunked_summation_agrees_with_sequential() {
        // The kernel keeps reductions sequential in f64; any chunked
        // regrouping must agree within 1e-6.
        let values: Vec<f64> = (0..10_000).map(|i| ((i * 2654435761u64 % 1000) as f64 - 500.0) * 1e-3).collect();
        let sequential = sum_f64(values.iter().copied());
        for chunk in [7usize, 64, 1333] {
            let chunked = sum_f64(values.chunks(chunk).map(|c| sum_f64(c.iter().copied())));
            assert!((sequential - chunked).abs() < 1e-6);
        }
    }
}
