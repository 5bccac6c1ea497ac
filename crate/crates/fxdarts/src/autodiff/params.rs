//! Persistent parameter storage shared by networks and optimizers.

use serde::{Deserialize, Serialize};

use super::tape::{Tape, TensorId};
use super::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named trainable tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub path: String,
    pub tensor: Tensor,
}

/// Flat registry of model parameters. Networks hold [`ParamId`]s instead of
/// tensors so the same storage serves forward passes, optimizer updates,
/// checkpointing, and reinitialization.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Paths must be unique within a store.
    pub fn register(&mut self, path: impl Into<String>, tensor: Tensor) -> ParamId {
        let path = path.into();
        debug_assert!(
            self.entries.iter().all(|e| e.path != path),
            "duplicate parameter path {path}"
        );
        self.entries.push(ParamEntry { path, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.entries[id.0].path
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn by_path(&self, path: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.path == path)
            .map(ParamId)
    }

    /// Total number of scalars across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn lens(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.tensor.numel()).collect()
    }
}

/// Memoizes parameter-to-tape bindings for one forward pass, so a parameter
/// reused by several operations appears on the tape exactly once and its
/// gradient accumulates across all uses.
pub struct Binder {
    bound: Vec<Option<TensorId>>,
}

impl Binder {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            bound: vec![None; store.len()],
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let t = tape.leaf(store.get(id).clone(), true);
        self.bound[id.0] = Some(t);
        t
    }

    /// Tape ids of every parameter touched this pass, in store order.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, TensorId)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (ParamId(i), t)))
    }

    pub fn lookup(&self, id: ParamId) -> Option<TensorId> {
        self.bound[id.0]
    }
}
