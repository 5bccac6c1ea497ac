//! Dense double-precision tensors.

use serde::{Deserialize, Serialize};

use super::TensorError;

/// A dense tensor of `f64` values in row-major layout.
///
/// Rank-0 tensors (empty shape) hold a single scalar. Gradients are not
/// stored here; they live on the [`Tape`](super::Tape) node that wraps the
/// tensor during a recorded forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// NCHW accessor used by the convolution kernels.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let (_, cs, hs, ws) = (
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
        );
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), TensorError> {
        if self.shape.len() != 4 {
            return Err(TensorError::RankMismatch {
                expected: 4,
                got: self.shape.len(),
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }
}
