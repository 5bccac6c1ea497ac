//! Desk-scale differentiable architecture search over a weight-shared
//! super-network, with entropy-based super-network shrinking.
//!
//! The search relaxes operator selection into per-node softmax mixtures,
//! trains the mixture coefficients jointly with the model weights, and
//! drives each cell's contribution-weight entropy down at a budgeted rate
//! by feedback-controlled sparsity coefficients. Operators whose weights
//! fall below a threshold are pruned in-loop, so a single run yields a
//! family of progressively sparser discrete architectures.
//!
//! Crate layout mirrors the pipeline:
//! [`autodiff`] (tensor engine) -> [`ops`] (candidate operators) ->
//! [`supernet`] (mixture network) -> [`entropy`] + [`ess`] (shrinking
//! controller) -> [`discretize`] + [`genotype`] (discrete architectures)
//! -> [`complexity`] (params/FLOPs accounting), with [`data`], [`config`],
//! [`checkpoint`], [`report`], and [`driver`] around them.

pub mod autodiff;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod data;
pub mod discretize;
pub mod driver;
pub mod entropy;
pub mod ess;
pub mod genotype;
pub mod ops;
pub mod report;
pub mod supernet;

pub use autodiff::{Tape, Tensor, TensorId};
pub use config::RunConfig;
pub use ess::{EssConfig, SearchOutcome};
pub use genotype::Genotype;
pub use ops::{OperatorKind, OperatorSpace, SpaceId};
pub use supernet::{ArchParams, NetDims, SuperNetwork};
