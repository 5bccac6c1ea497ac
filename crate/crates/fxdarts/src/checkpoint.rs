//! Versioned super-network checkpoints.
//!
//! A checkpoint is a single JSON document with a version header holding
//! the network dimensions, alphas with their alive mask, all model
//! parameters, both optimizer states, and the controller's lambdas.
//! Loading rebuilds the super-network structure deterministically and
//! swaps in the stored values.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::autodiff::optim::AdamState;
use crate::autodiff::ParamStore;
use crate::ops::SpaceId;
use crate::supernet::{init_supernet, ArchParams, NetDims, NetError, SuperNetwork};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {got} unsupported (expected {expected})")]
    Version { got: u32, expected: u32 },

    #[error("checkpoint parameter table has {got} entries, rebuilt network has {expected}")]
    StoreMismatch { got: usize, expected: usize },

    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: NetDims,
    pub space: SpaceId,
    pub arch: ArchParams,
    pub theta: ParamStore,
    pub theta_opt: Option<AdamState>,
    pub alpha_opt: Option<AdamState>,
    pub lambda: Vec<f64>,
    pub completed_rounds: usize,
    pub cumulative_epochs: usize,
}

impl Checkpoint {
    pub fn from_network(
        net: &SuperNetwork,
        lambda: Vec<f64>,
        theta_opt: Option<AdamState>,
        alpha_opt: Option<AdamState>,
        completed_rounds: usize,
        cumulative_epochs: usize,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            dims: net.dims,
            space: net.space.id,
            arch: net.arch.clone(),
            theta: net.store.clone(),
            theta_opt,
            alpha_opt,
            lambda,
            completed_rounds,
            cumulative_epochs,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                got: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(ckpt)
    }

    /// Reconstructs the super-network this checkpoint came from. The
    /// structure is rebuilt with a throwaway seed and the stored theta and
    /// alpha values are swapped in (construction order is deterministic,
    /// so parameter handles line up).
    pub fn restore(&self) -> Result<SuperNetwork, CheckpointError> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = init_supernet(self.dims, self.space, &mut rng)?;
        if net.store.len() != self.theta.len() {
            return Err(CheckpointError::StoreMismatch {
                got: self.theta.len(),
                expected: net.store.len(),
            });
        }
        net.store = self.theta.clone();
        net.arch = self.arch.clone();
        Ok(net)
    }
}
