//! Super-network discretization: in-loop threshold pruning, genotype
//! extraction, the classic top-2 constrained baseline, and rebuilding
//! discrete networks for retraining.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Binder, ParamStore, Tape, Tensor, TensorId};
use crate::genotype::{Genotype, GenotypeCell, GenotypeEdge, GenotypeError};
use crate::ops::{self, OperatorInstance, OperatorKind};
use crate::supernet::{
    apply_classifier, apply_stem, cell_layouts, reinit_store, CellKind, CellLayout, Classifier,
    NetDims, NetError, Stem, SuperNetwork,
};

#[derive(Debug, Error)]
pub enum DiscretizeError {
    #[error("cell {cell}: node {node} has fewer than two predecessors with live operators")]
    TooFewPredecessors { cell: usize, node: usize },

    #[error(transparent)]
    Genotype(#[from] GenotypeError),

    #[error(transparent)]
    Net(#[from] NetError),
}

/// One entry removed by a `dynamic_discretize` call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneEvent {
    /// 1-based cell index.
    pub cell: usize,
    pub node: usize,
    pub from: usize,
    pub op: OperatorKind,
    /// Contribution weight at the moment of pruning.
    pub weight: f64,
}

/// Alive-entry indices that a threshold sweep removes from one node:
/// every alive entry with weight strictly below `epsilon`, except that
/// the largest-weight entry always survives when everything else would
/// die (a dead computing node would sever the concat output). The
/// argmax tie breaks toward the lower index.
pub fn threshold_deaths(weights: &[f64], alive: &[bool], epsilon: f64) -> Vec<usize> {
    let survivors = alive
        .iter()
        .enumerate()
        .filter(|&(e, &a)| a && weights[e] >= epsilon)
        .count();
    let guard = if survivors == 0 {
        alive
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a)
            .max_by(|a, b| weights[a.0].partial_cmp(&weights[b.0]).unwrap())
            .map(|(e, _)| e)
    } else {
        None
    };
    (0..alive.len())
        .filter(|&e| alive[e] && weights[e] < epsilon && guard != Some(e))
        .collect()
}

/// Threshold pruning over the whole super-network; weights renormalize
/// implicitly on the next softmax.
pub fn dynamic_discretize(net: &mut SuperNetwork, epsilon: f64) -> Vec<PruneEvent> {
    let mut events = Vec::new();
    let num_cells = net.arch.num_cells();
    for k in 0..num_cells {
        for j in net.arch.computing_nodes().collect::<Vec<_>>() {
            let weights = net
                .arch
                .contribution_weights(k, j)
                .expect("search loop never leaves a dead node");
            let node = net.arch.node_mut(k, j);
            for e in threshold_deaths(&weights, &node.alive, epsilon) {
                node.alive[e] = false;
                let (from, o) = (e / net.space.len() + 1, e % net.space.len());
                events.push(PruneEvent {
                    cell: k + 1,
                    node: j,
                    from,
                    op: net.space.kinds()[o],
                    weight: weights[e],
                });
            }
        }
    }
    events
}

/// Materializes the alive mask as a genotype with canonical edge order.
pub fn extract_genotype(net: &SuperNetwork) -> Result<Genotype, DiscretizeError> {
    let mut cells = Vec::with_capacity(net.cells.len());
    for (k, cell) in net.cells.iter().enumerate() {
        let mut edges = Vec::new();
        for j in net.arch.computing_nodes() {
            let node = net.arch.node(k, j);
            for (e, &alive) in node.alive.iter().enumerate() {
                if alive {
                    let (from, o) = net.arch.entry_coords(e);
                    edges.push(GenotypeEdge {
                        from,
                        to: j,
                        op: net.space.kinds()[o],
                    });
                }
            }
        }
        cells.push(GenotypeCell {
            k: k + 1,
            kind: cell.spec.kind,
            edges,
        });
    }
    let mut genotype = Genotype {
        space: net.space.id,
        node_count: net.dims.nodes,
        cells,
    };
    genotype.canonicalize();
    genotype.validate()?;
    Ok(genotype)
}

/// Classic topology-constrained baseline: per edge keep the operator with
/// the largest edgewise weight, per node keep the two predecessor edges
/// with the largest retained weights. Ties break toward the lower index.
pub fn constrained_discretize(net: &SuperNetwork) -> Result<Genotype, DiscretizeError> {
    let mut cells = Vec::with_capacity(net.cells.len());
    for (k, cell) in net.cells.iter().enumerate() {
        let mut edges = Vec::new();
        for j in net.arch.computing_nodes() {
            // (weight of best op, predecessor, op index); stable order keeps
            // the lower predecessor on ties.
            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            for i in 1..j {
                if let Some(ew) = net.arch.edgewise_weights(k, i, j) {
                    let (best_o, best_w) = ew
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |(bo, bw), (o, &w)| {
                            if w > bw {
                                (o, w)
                            } else {
                                (bo, bw)
                            }
                        });
                    candidates.push((best_w, i, best_o));
                }
            }
            if candidates.len() < 2 {
                return Err(DiscretizeError::TooFewPredecessors {
                    cell: k + 1,
                    node: j,
                });
            }
            // Top-2 by weight, lower predecessor index on ties.
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then_with(|| a.1.cmp(&b.1))
            });
            for &(_, i, o) in candidates.iter().take(2) {
                edges.push(GenotypeEdge {
                    from: i,
                    to: j,
                    op: net.space.kinds()[o],
                });
            }
        }
        cells.push(GenotypeCell {
            k: k + 1,
            kind: cell.spec.kind,
            edges,
        });
    }
    let mut genotype = Genotype {
        space: net.space.id,
        node_count: net.dims.nodes,
        cells,
    };
    genotype.canonicalize();
    genotype.validate()?;
    Ok(genotype)
}

/// A discrete architecture rebuilt for from-scratch retraining. Retained
/// operators contribute to their node with coefficient 1; mixture weights
/// are dropped entirely.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteNetwork {
    pub dims: NetDims,
    pub layouts: Vec<CellLayout>,
    pub genotype: Genotype,
    /// `cells[k]` holds one operator instance per retained edge, in the
    /// genotype's canonical edge order.
    pub cells: Vec<Vec<(GenotypeEdge, OperatorInstance)>>,
    pub stem: Stem,
    pub classifier: Classifier,
    pub store: ParamStore,
}

/// Channel/resolution context for a rebuild.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RebuildSpec {
    pub channels: usize,
    pub in_channels: usize,
    pub input_hw: usize,
    pub classes: usize,
}

/// Builds a trainable network from a genotype with fresh parameters.
pub fn rebuild_discrete(
    genotype: &Genotype,
    spec: &RebuildSpec,
    rng: &mut impl Rng,
) -> Result<DiscreteNetwork, DiscretizeError> {
    genotype.validate()?;
    let dims = NetDims {
        cells: genotype.cells.len(),
        nodes: genotype.node_count,
        channels: spec.channels,
        in_channels: spec.in_channels,
        input_hw: spec.input_hw,
        classes: spec.classes,
    };
    let kinds: Vec<CellKind> = genotype.cells.iter().map(|c| c.kind).collect();
    let layouts = cell_layouts(&dims, &kinds)?;

    let mut store = ParamStore::new();
    let stem = crate::supernet::build_stem_for(&dims, &mut store, rng);
    let mut cells = Vec::with_capacity(genotype.cells.len());
    for (cell, layout) in genotype.cells.iter().zip(&layouts) {
        let mut built = Vec::with_capacity(cell.edges.len());
        for edge in &cell.edges {
            let (in_ch, out_ch, stride) = layout.edge_shape(edge.from);
            let path = format!("cell{}.n{}.from{}.{}", cell.k, edge.to, edge.from, edge.op.tag());
            let op = ops::build_operator(edge.op, in_ch, out_ch, stride, &mut store, &path, rng)
                .map_err(NetError::from)?;
            built.push((edge.clone(), op));
        }
        cells.push(built);
    }
    let classifier =
        crate::supernet::build_classifier_for(&dims, layouts.last().unwrap(), &mut store, rng);
    Ok(DiscreteNetwork {
        dims,
        layouts,
        genotype: genotype.clone(),
        cells,
        stem,
        classifier,
        store,
    })
}

impl DiscreteNetwork {
    /// Records a forward pass; node values are plain sums over retained
    /// edges.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tape, Binder, TensorId), NetError> {
        let (_, c, _, _) = batch.dims4()?;
        if c != self.dims.in_channels {
            return Err(NetError::InputChannels {
                expected: self.dims.in_channels,
                got: c,
            });
        }
        let mut tape = Tape::new();
        let mut binder = Binder::for_store(&self.store);
        let x = tape.constant(batch.clone());
        let s = apply_stem(&self.stem, &mut tape, &mut binder, &self.store, x)?;
        let mut prev_prev = s;
        let mut prev = s;
        for cell in &self.cells {
            let mut nodes: Vec<TensorId> = vec![prev_prev, prev];
            for j in 3..self.dims.nodes {
                let mut acc: Option<TensorId> = None;
                for (edge, op) in cell {
                    if edge.to != j {
                        continue;
                    }
                    let y = ops::apply(op, &mut tape, &mut binder, &self.store, nodes[edge.from - 1])?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, y)?,
                        None => y,
                    });
                }
                nodes.push(acc.expect("validated genotype has no empty node"));
            }
            let out = tape.concat(&nodes[2..])?;
            prev_prev = prev;
            prev = out;
        }
        let logits = apply_classifier(&self.classifier, &mut tape, &mut binder, &self.store, prev)?;
        Ok((tape, binder, logits))
    }

    pub fn reinit(&mut self, rng: &mut impl Rng) {
        reinit_store(&mut self.store, rng);
    }
}
