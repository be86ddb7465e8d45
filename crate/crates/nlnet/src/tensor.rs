//! Dense tensors: row-major storage with an optional same-shape gradient.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Dense N-dimensional array. `grad`, when present, has the same length as
/// `data`; it is filled by [`crate::tape::Tape::backward`] via the owning
/// layer and consumed by the optimizer.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape} wants {} elements, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        let shape = Shape::new(dims).expect("valid dims");
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn full(dims: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = Shape::new(dims).expect("valid dims");
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![v; n],
            grad: None,
        }
    }

    /// Uniform samples in `[lo, hi)`, drawn from an f64 master stream so the
    /// bit pattern of the stream does not depend on `T`.
    pub fn rand_uniform(dims: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let shape = Shape::new(dims).expect("valid dims");
        let n = shape.numel();
        let data = (0..n)
            .map(|_| T::lit(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    /// Zero-mean normal samples with the given standard deviation.
    pub fn randn(dims: impl Into<Vec<usize>>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let shape = Shape::new(dims).expect("valid dims");
        let n = shape.numel();
        let dist = Normal::new(0.0f64, std).expect("valid std");
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn set_grad(&mut self, g: Vec<T>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulate into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        let buf = self.grad_mut();
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.to_string(),
                rhs: shape.to_string(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            grad: None,
        })
    }

    /// Largest absolute elementwise difference, as f64.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    /// True when every element is bitwise-identical.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_length_must_match_shape() {
        assert!(Tensor::<f64>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f64>::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
    }
}
