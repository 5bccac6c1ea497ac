//! Sparsity-entropy losses, their analytic gradients, and the per-step
//! entropy-reduction budget.
//!
//! Entropies are Shannon entropies in nats (natural log) of a node's
//! contribution-weight distribution, summed per cell. The analytic
//! gradient of a node entropy with respect to its alphas is
//! `-a * (ln a + H)`, which the tests cross-check against the tape
//! gradient of the composed softmax/xlogx route.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::supernet::{ArchParams, NetError};

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("negative weight {0} in distribution")]
    NegativeWeight(f64),

    #[error("weights sum to {0}, expected 1 within 1e-9")]
    NotNormalized(f64),

    #[error("entropy-reduction budget has a zero denominator")]
    ZeroDenominator,

    #[error("lambda_exact requires a non-zero entropy gradient")]
    ZeroEntropyGradient,

    #[error(transparent)]
    Net(#[from] NetError),
}

/// Per-cell entropies at one step of the search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropySnapshot {
    pub step: usize,
    pub per_cell: Vec<f64>,
    pub total: f64,
}

impl EntropySnapshot {
    pub fn capture(arch: &ArchParams, step: usize) -> Result<Self, EntropyError> {
        let per_cell: Result<Vec<f64>, EntropyError> =
            (0..arch.num_cells()).map(|k| cell_entropy(arch, k)).collect();
        let per_cell = per_cell?;
        let total = per_cell.iter().sum();
        Ok(Self {
            step,
            per_cell,
            total,
        })
    }
}

/// `-sum w ln w` with the continuous extension `0 ln 0 = 0`. Weights must
/// be non-negative and sum to 1 within 1e-9.
pub fn node_entropy(weights: &[f64]) -> Result<f64, EntropyError> {
    let mut sum = 0.0;
    for &w in weights {
        if w < 0.0 {
            return Err(EntropyError::NegativeWeight(w));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(EntropyError::NotNormalized(sum));
    }
    Ok(weights
        .iter()
        .map(|&w| if w > 0.0 { -w * w.ln() } else { 0.0 })
        .sum())
}

/// Sum of node entropies over the computing nodes of cell `k`.
pub fn cell_entropy(arch: &ArchParams, k: usize) -> Result<f64, EntropyError> {
    let mut total = 0.0;
    for j in arch.computing_nodes() {
        let w = arch.contribution_weights(k, j)?;
        total += node_entropy(&w)?;
    }
    Ok(total)
}

pub fn total_entropy(arch: &ArchParams) -> Result<f64, EntropyError> {
    (0..arch.num_cells()).map(|k| cell_entropy(arch, k)).try_fold(0.0, |acc, e| Ok(acc + e?))
}

/// Upper bound `sum_j ln(alive count at node j)` for cell `k`.
pub fn cell_entropy_bound(arch: &ArchParams, k: usize) -> f64 {
    arch.computing_nodes()
        .map(|j| (arch.node(k, j).alive_count().max(1) as f64).ln())
        .sum()
}

/// Analytic gradient of cell `k`'s entropy with respect to each alpha
/// entry: `-a (ln a + H_node)` on alive entries, zero on pruned ones.
/// Returned per node in the cell's node order.
pub fn entropy_grad_analytic(arch: &ArchParams, k: usize) -> Result<Vec<Vec<f64>>, EntropyError> {
    let mut out = Vec::new();
    for j in arch.computing_nodes() {
        let weights = arch.contribution_weights(k, j)?;
        let h = node_entropy(&weights)?;
        let alive = &arch.node(k, j).alive;
        let grad = weights
            .iter()
            .zip(alive)
            .map(|(&a, &is_alive)| {
                if is_alive && a > 0.0 {
                    -a * (a.ln() + h)
                } else {
                    0.0
                }
            })
            .collect();
        out.push(grad);
    }
    Ok(out)
}

/// Per-step entropy-reduction budget: the total initial entropy spread
/// uniformly over every cell and every step of the whole search.
pub fn expected_entropy_reduction(
    initial_total_entropy: f64,
    cells: usize,
    steps_per_epoch: usize,
    t_search: usize,
    r_init: usize,
) -> Result<f64, EntropyError> {
    let denom = cells * steps_per_epoch * t_search * r_init;
    if denom == 0 {
        return Err(EntropyError::ZeroDenominator);
    }
    Ok(initial_total_entropy / denom as f64)
}

/// The coefficient that makes the first-order entropy decrement equal the
/// budget: `(dE - eta <gH, gCE>) / (eta ||gH||^2)`. Provided for the
/// verification harness; the controller adapts lambda by feedback instead.
pub fn lambda_exact(
    delta_e: f64,
    eta: f64,
    grad_entropy: &[f64],
    grad_ce: &[f64],
) -> Result<f64, EntropyError> {
    let norm_sq: f64 = grad_entropy.iter().map(|g| g * g).sum();
    if norm_sq == 0.0 {
        return Err(EntropyError::ZeroEntropyGradient);
    }
    let dot: f64 = grad_entropy.iter().zip(grad_ce).map(|(a, b)| a * b).sum();
    Ok((delta_e - eta * dot) / (eta * norm_sq))
}
