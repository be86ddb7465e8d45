//! Tensor shapes: ordered lists of positive extents with row-major indexing.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Shape of a dense tensor. Every extent is at least 1 and the element count
/// fits in `usize`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("shape", "no dimensions"));
        }
        let mut numel: usize = 1;
        for &d in &dims {
            if d == 0 {
                return Err(Error::shape("shape", format!("zero extent in {dims:?}")));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::shape("shape", format!("element count overflow in {dims:?}")))?;
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    /// Linear index of a multi-index. Caller guarantees bounds.
    pub fn index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.0.len());
        let mut lin = 0;
        for (i, &x) in idx.iter().enumerate() {
            debug_assert!(x < self.0[i]);
            lin = lin * self.0[i] + x;
        }
        lin
    }

    /// Multi-index of a linear index.
    pub fn unindex(&self, mut lin: usize) -> Vec<usize> {
        let mut idx = vec![0; self.0.len()];
        for i in (0..self.0.len()).rev() {
            idx[i] = lin % self.0[i];
            lin /= self.0[i];
        }
        idx
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extents() {
        assert!(Shape::new(vec![2, 0, 3]).is_err());
        assert!(Shape::new(vec![]).is_err());
    }

    #[test]
    fn index_roundtrip() {
        let s = Shape::new(vec![2, 3, 4]).unwrap();
        assert_eq!(s.numel(), 24);
        assert_eq!(s.strides(), vec![12, 4, 1]);
        for lin in 0..24 {
            assert_eq!(s.index(&s.unindex(lin)), lin);
        }
    }
}
