//! Dense row-major tensors.

use crate::scalar::Real;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} has a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("shape mismatch: {left:?} vs {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
}

/// Dense tensor with row-major storage. A scalar has shape `[]` and one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[T]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// 2-D tensor from a row-major slice.
    pub fn from_rows(rows: usize, cols: usize, values: &[T]) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], values.to_vec())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a scalar (or single-entry) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor of len {}", self.data.len());
        self.data[0]
    }

    /// Reinterpret with a new shape of identical volume.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major matrix product with optional transposes; transposed
    /// operands are handled through gemm strides without copying.
    pub fn matmul(&self, other: &Self, trans_a: bool, trans_b: bool) -> Result<Self, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: self.shape.clone(),
            right: other.shape.clone(),
        };
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(mismatch());
        }
        let (m, ka) = if trans_a {
            (self.shape[1], self.shape[0])
        } else {
            (self.shape[0], self.shape[1])
        };
        let (kb, n) = if trans_b {
            (other.shape[1], other.shape[0])
        } else {
            (other.shape[0], other.shape[1])
        };
        if ka != kb {
            return Err(mismatch());
        }
        let (rsa, csa) = if trans_a {
            (1, self.shape[1] as isize)
        } else {
            (self.shape[1] as isize, 1)
        };
        let (rsb, csb) = if trans_b {
            (1, other.shape[1] as isize)
        } else {
            (other.shape[1] as isize, 1)
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm_strided(
            m, ka, n, &self.data, rsa, csa, &other.data, rsb, csb, T::zero(), &mut out,
        );
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_1x2_by_2x1() {
        let a = Tensor::<f64>::from_rows(1, 2, &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_rows(2, 1, &[3.0, 4.0]).unwrap();
        let c = a.matmul(&b, false, false).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    fn matmul_transpose_flags() {
        let a = Tensor::<f64>::from_rows(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::<f64>::from_rows(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        // aᵀ·bᵀ? use a·bᵀ: (2×3)·(3×2) = 2×2
        let c = a.matmul(&b, false, true).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn bad_shapes_error() {
        let a = Tensor::<f64>::from_rows(1, 2, &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_rows(3, 1, &[1.0, 2.0, 3.0]).unwrap();
        assert!(a.matmul(&b, false, false).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn scalar_tensor() {
        let s = Tensor::<f32>::scalar(2.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 2.5);
    }
}
