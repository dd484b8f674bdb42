//! Flat `f64` tensors with shape metadata.
//!
//! A tensor is either flat (`[D]`) or image-shaped (`[channels, height, width]`,
//! row-major). Every value must be finite; constructors reject NaN and infinities.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let expected = checked_numel(&shape)?;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { data, shape })
    }

    /// Flat tensor of shape `[data.len()]`.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(data, vec![n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        Ok(Self {
            data: vec![0.0; n],
            shape: shape.to_vec(),
        })
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    /// Internal constructor for values produced by finite arithmetic on finite inputs.
    pub(crate) fn from_parts(data: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor value");
        Self { data, shape }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `(channels, height, width)` for image tensors.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        image_dims(&self.shape)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let expected = checked_numel(shape)?;
        if expected != self.data.len() {
            return Err(Error::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Self {
            data: self.data,
            shape: shape.to_vec(),
        })
    }

    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Self {
            data: self.data,
            shape: vec![n],
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.data.iter().map(|&v| f(v)).collect(), self.shape.clone())
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    /// `alpha * self + beta * other`
    pub fn lincomb(&self, alpha: f64, other: &Tensor, beta: f64) -> Result<Self> {
        self.zip(other, |a, b| alpha * a + beta * b)
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_len(other.len(), "elementwise operands")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(data, self.shape.clone()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_len(other.len(), "dot operands")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub(crate) fn check_len(&self, expected: usize, context: &'static str) -> Result<()> {
        if self.data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: self.data.len(),
                context,
            });
        }
        Ok(())
    }
}

impl AsRef<[f64]> for Tensor {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match n {
        Some(n) if n > 0 && !shape.is_empty() => Ok(n),
        _ => Err(Error::EmptyTensor(shape.to_vec())),
    }
}

pub(crate) fn image_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((c, h, w)),
        _ => None,
    }
}
