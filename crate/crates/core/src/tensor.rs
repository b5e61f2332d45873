//! Dense row-major tensor value type.
//!
//! `Tensor` owns its data; gradients recorded by a [`crate::tape::Tape`]
//! are copied back into the `grad` accumulator after a backward pass.


use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    /// Present iff `requires_grad`; always the same length as `data`.
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                context: "from_vec: shape product vs data length",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: S, rng: &mut impl Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::cast(gaussian_sample(rng)) * std)
            .collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    /// Identity-like matrix: ones on the diagonal of a `rows x cols` matrix.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut t = Tensor::zeros(vec![rows, cols]);
        for i in 0..rows.min(cols) {
            t.data[i * cols + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Toggle gradient tracking; allocates or drops the accumulator.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![S::zero(); self.data.len()]);
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, g: &[S]) {
        debug_assert_eq!(g.len(), self.data.len());
        if let Some(grad) = self.grad.as_mut() {
            for (dst, src) in grad.iter_mut().zip(g) {
                *dst += *src;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(grad) = self.grad.as_mut() {
            grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Number of rows when viewed as 2-D (1-D tensors count as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }
}

/// Standard normal via Box-Muller; uses only `Rng::gen` so the stream is
/// reproducible across rand versions that keep `gen::<f64>` stable.
pub fn gaussian_sample(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn grad_present_iff_requires_grad() {
        let mut t = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        assert_eq!(t.grad().unwrap(), &[0.0; 4]);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn accumulate_adds() {
        let mut t = Tensor::<f64>::zeros(vec![3]).with_requires_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 0.0, -1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn eye_times_matrix_is_matrix() {
        let i = Tensor::<f64>::eye(2, 2);
        assert_eq!(i.data(), &[1.0, 0.0, 0.0, 1.0]);
    }
}
