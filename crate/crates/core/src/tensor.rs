//! Dense row-major tensors over `f32` or `f64`.
//!
//! Training runs in 32-bit; every verification oracle (finite differences,
//! Monte Carlo, quadrature) instantiates the same code at 64-bit. The
//! [`Real`] trait is the abstraction point between the two.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

use crate::error::{Error, Result};

/// Floating-point scalar usable by the tape and the models.
pub trait Real:
    Float + NumAssignOps + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from a literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array (rank 1 or 2 in practice), row-major.
///
/// `grad` is populated only on tensors handed back by gradient queries;
/// intermediate values never carry one.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    /// Build a tensor, checking the shape/size invariant and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || shape.is_empty() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                msg: "extents must be positive".into(),
            });
        }
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                msg: format!("shape implies {} values, got {}", numel, data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data, grad: None })
    }

    /// Constructor for freshly computed primitive outputs: shape is checked,
    /// finiteness is left to the caller (which reports the primitive name).
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                msg: format!("shape implies {} values, got {}", numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// A 1×n row vector.
    pub fn row(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![1, n], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], grad: None }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![v; numel], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row count; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count; for rank-1 tensors this is the length.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Attach an accumulated gradient (same shape as the values).
    pub fn with_grad(mut self, grad: Vec<T>) -> Result<Self> {
        if grad.len() != self.data.len() {
            return Err(Error::InvalidShape {
                op: "with_grad",
                shape: self.shape.clone(),
                msg: format!("gradient has {} values", grad.len()),
            });
        }
        self.grad = Some(grad);
        Ok(self)
    }

    /// Convert element type (f32 -> f64 for oracle paths and back).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape { .. }));
    }

    #[test]
    fn rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        let err = Tensor::new(vec![1], vec![f32::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn grad_must_match_shape() {
        let t = Tensor::vector(vec![1.0f64, 2.0]).unwrap();
        assert!(t.clone().with_grad(vec![1.0]).is_err());
        let g = t.with_grad(vec![0.5, 0.5]).unwrap();
        assert_eq!(g.grad().unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn cast_round_trips_values() {
        let t = Tensor::vector(vec![1.5f32, -2.25]).unwrap();
        let d: Tensor<f64> = t.cast();
        assert_eq!(d.data(), &[1.5, -2.25]);
    }
}
