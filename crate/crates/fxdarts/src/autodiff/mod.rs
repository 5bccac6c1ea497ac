//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Sized for training tiny convolutional classifiers on a CPU core and for
//! differentiating the sparsity-entropy losses used by the search
//! controller. Everything is double precision; tapes are single-threaded
//! and rebuilt per forward pass.

pub mod conv;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{Binder, ParamId, ParamStore};
pub use tape::{masked_softmax_values, Tape, TensorId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {} elements but data has {len}", shape.iter().product::<usize>())]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },

    #[error("expected rank {expected} tensor, got rank {got}")]
    RankMismatch { expected: usize, got: usize },

    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    BinaryShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: dimension `{dim}` expected {expected}, got {got}")]
    DimMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid convolution: {detail}")]
    InvalidConvSpec { detail: String },

    #[error("axis {axis} out of range for rank-{rank} tensor")]
    BadAxis { axis: usize, rank: usize },

    #[error("{op}: non-finite values in input")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("concat requires at least one input")]
    EmptyConcat,

    #[error("masked softmax over an all-dead entry set")]
    AllMasked,

    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}
