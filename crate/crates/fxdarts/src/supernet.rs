//! Weight-shared super-network with cell-unique architectural parameters.
//!
//! The network stacks `L` cells of `N` nodes. Nodes 1 and 2 of cell `k` are
//! the outputs of cells `k-2` and `k-1` (the stem substitutes for missing
//! predecessors); nodes `3..=N-1` are computing nodes; node `N` is the
//! channel concatenation of all computing nodes. Every edge into a
//! computing node carries one operator instance per candidate kind, mixed
//! by contribution weights that are softmax-normalized jointly over all
//! alive (predecessor, operator) pairs of the node.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{masked_softmax_values, Binder, ParamStore, Tape, Tensor, TensorError, TensorId};
use crate::ops::{self, OpError, OperatorInstance, OperatorSpace, SpaceId};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid configuration: {detail}")]
    BadConfig { detail: String },

    #[error("dead node: cell {cell} node {node} has no alive entries")]
    DeadNode { cell: usize, node: usize },

    #[error("input has {got} channels, network expects {expected}")]
    InputChannels { expected: usize, got: usize },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Op(#[from] OpError),
}

/// Normal cells preserve resolution; reduction cells halve it and double
/// the channel width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Reduction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSpec {
    /// 1-based cell index.
    pub index: usize,
    pub kind: CellKind,
    pub node_count: usize,
    /// Channels of each node in this cell.
    pub width: usize,
}

/// 1-based indices of the two reduction cells: floor(L/3)+1 and
/// floor(2L/3)+1.
pub fn reduction_positions(l: usize) -> (usize, usize) {
    (l / 3 + 1, 2 * l / 3 + 1)
}

/// Architectural parameters of one computing node: a flat vector over all
/// (predecessor, operator) pairs, with a parallel alive mask. Entry
/// `(i, o)` lives at `(i - 1) * |O| + o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAlpha {
    pub alphas: Vec<f64>,
    pub alive: Vec<bool>,
}

impl NodeAlpha {
    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }
}

/// Per-cell, per-node meta-parameters. Cells never share an alpha block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    /// `cells[k][j - 3]` holds the block for computing node `j` of cell `k`
    /// (cell index 0-based here; node indices follow the 1-based DAG
    /// numbering used everywhere else).
    pub cells: Vec<Vec<NodeAlpha>>,
    pub node_count: usize,
    pub num_ops: usize,
}

impl ArchParams {
    /// All-zero alphas, all entries alive.
    pub fn uniform(l: usize, n: usize, num_ops: usize) -> Self {
        let cells = (0..l)
            .map(|_| {
                (3..n)
                    .map(|j| {
                        let entries = (j - 1) * num_ops;
                        NodeAlpha {
                            alphas: vec![0.0; entries],
                            alive: vec![true; entries],
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            cells,
            node_count: n,
            num_ops,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Computing-node indices: `3..=N-1`.
    pub fn computing_nodes(&self) -> impl Iterator<Item = usize> {
        3..self.node_count
    }

    pub fn entry_index(&self, i: usize, o: usize) -> usize {
        (i - 1) * self.num_ops + o
    }

    /// Decodes a flat entry index back to (predecessor, operator).
    pub fn entry_coords(&self, e: usize) -> (usize, usize) {
        (e / self.num_ops + 1, e % self.num_ops)
    }

    pub fn node(&self, k: usize, j: usize) -> &NodeAlpha {
        &self.cells[k][j - 3]
    }

    pub fn node_mut(&mut self, k: usize, j: usize) -> &mut NodeAlpha {
        &mut self.cells[k][j - 3]
    }

    /// Contribution weights of computing node `j` in cell `k`: a softmax
    /// over all alive (predecessor, operator) entries jointly. Dead entries
    /// hold exactly zero.
    pub fn contribution_weights(&self, k: usize, j: usize) -> Result<Vec<f64>, NetError> {
        let node = self.node(k, j);
        if node.alive_count() == 0 {
            return Err(NetError::DeadNode { cell: k, node: j });
        }
        Ok(masked_softmax_values(&node.alphas, &node.alive))
    }

    /// Softmax over the operators of a single edge `(i, j)`, the
    /// normalization used by the constrained-discretization baseline.
    /// `None` when every operator of the edge has been pruned.
    pub fn edgewise_weights(&self, k: usize, i: usize, j: usize) -> Option<Vec<f64>> {
        let node = self.node(k, j);
        let base = (i - 1) * self.num_ops;
        let alphas = &node.alphas[base..base + self.num_ops];
        let alive = &node.alive[base..base + self.num_ops];
        if !alive.iter().any(|&a| a) {
            return None;
        }
        Some(masked_softmax_values(alphas, alive))
    }

    /// Total number of (cell, node, predecessor, operator) entries.
    pub fn total_entries(&self) -> usize {
        self.cells
            .iter()
            .flat_map(|c| c.iter())
            .map(|n| n.alphas.len())
            .sum()
    }

    pub fn total_alive(&self) -> usize {
        self.cells
            .iter()
            .flat_map(|c| c.iter())
            .map(|n| n.alive_count())
            .sum()
    }

    /// True when `other` keeps alive only entries alive in `self`.
    pub fn mask_superset_of(&self, other: &ArchParams) -> bool {
        self.cells
            .iter()
            .zip(&other.cells)
            .all(|(a, b)| {
                a.iter().zip(b).all(|(na, nb)| {
                    na.alive
                        .iter()
                        .zip(&nb.alive)
                        .all(|(&sa, &sb)| sa || !sb)
                })
            })
    }
}

/// Dimensions of a super-network (and of rebuilt discrete networks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub cells: usize,
    pub nodes: usize,
    pub channels: usize,
    pub in_channels: usize,
    pub input_hw: usize,
    pub classes: usize,
}

/// Channel/resolution bookkeeping for one cell.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CellLayout {
    pub kind: CellKind,
    pub width: usize,
    /// Resolution of the computing nodes.
    pub res: usize,
    /// (channels, resolution) of input nodes 1 and 2.
    pub inputs: [(usize, usize); 2],
}

impl CellLayout {
    /// (in_channels, out_channels, stride) of the edge from node `i`.
    pub fn edge_shape(&self, i: usize) -> (usize, usize, usize) {
        let (c, r) = if i <= 2 {
            self.inputs[i - 1]
        } else {
            (self.width, self.res)
        };
        (c, self.width, r / self.res)
    }
}

/// Derives widths, resolutions, and edge strides for a stack of cells.
/// Same arithmetic backs the super-network, rebuilt discrete networks, and
/// the closed-form complexity accounting.
pub fn cell_layouts(dims: &NetDims, kinds: &[CellKind]) -> Result<Vec<CellLayout>, NetError> {
    let n = dims.nodes;
    let concat = n - 3; // computing nodes contributing to the cell output
    let mut out = Vec::with_capacity(kinds.len());
    // (channels, resolution) of preceding cell outputs; the stem stands in
    // for missing predecessors.
    let stem = (dims.channels, dims.input_hw);
    let mut prev_prev = stem;
    let mut prev = stem;
    let mut width = dims.channels;
    let mut res = dims.input_hw;
    for kind in kinds {
        if *kind == CellKind::Reduction {
            width *= 2;
            if res % 2 != 0 || res < 2 {
                return Err(NetError::BadConfig {
                    detail: format!("resolution {res} cannot be halved"),
                });
            }
            res /= 2;
        }
        for (c, r) in [prev_prev, prev] {
            let stride = r / res;
            if r % res != 0 || !matches!(stride, 1 | 2 | 4) {
                return Err(NetError::BadConfig {
                    detail: format!("edge stride {r}/{res} unsupported"),
                });
            }
            let _ = c;
        }
        let layout = CellLayout {
            kind: *kind,
            width,
            res,
            inputs: [prev_prev, prev],
        };
        out.push(layout);
        prev_prev = prev;
        prev = (concat * width, res);
    }
    Ok(out)
}

/// Cell kinds for `L` cells with reductions at the standard 1/3 and 2/3
/// depth positions.
pub fn standard_cell_kinds(l: usize) -> Vec<CellKind> {
    let (r1, r2) = reduction_positions(l);
    (1..=l)
        .map(|k| {
            if k == r1 || k == r2 {
                CellKind::Reduction
            } else {
                CellKind::Normal
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperCell {
    pub spec: CellSpec,
    /// `banks[j - 3][i - 1][o]`: the operator instance for entry (i, o) of
    /// computing node j.
    pub banks: Vec<Vec<Vec<OperatorInstance>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stem {
    pub conv: crate::autodiff::ParamId,
    pub norm: ops::NormParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    pub weight: crate::autodiff::ParamId,
    pub bias: crate::autodiff::ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperNetwork {
    pub dims: NetDims,
    pub space: OperatorSpace,
    pub layouts: Vec<CellLayout>,
    pub cells: Vec<SuperCell>,
    pub stem: Stem,
    pub classifier: Classifier,
    pub arch: ArchParams,
    /// Model parameters (theta). Architectural parameters live in `arch`.
    pub store: ParamStore,
}

/// Handles produced by one recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub binder: Binder,
    pub logits: TensorId,
    /// `alpha_ids[k][j - 3]`: tape leaf of each node's alpha vector.
    pub alpha_ids: Vec<Vec<TensorId>>,
    /// `weight_ids[k][j - 3]`: masked-softmax contribution weights.
    pub weight_ids: Vec<Vec<TensorId>>,
}

/// Builds a fresh super-network: alphas at zero (uniform contribution
/// weights per node), every entry alive, theta freshly initialized.
pub fn init_supernet(
    dims: NetDims,
    space_id: SpaceId,
    rng: &mut impl Rng,
) -> Result<SuperNetwork, NetError> {
    if dims.cells < 3 || dims.nodes < 4 {
        return Err(NetError::BadConfig {
            detail: format!(
                "need at least 3 cells and 4 nodes, got L={} N={}",
                dims.cells, dims.nodes
            ),
        });
    }
    if dims.channels == 0 || dims.in_channels == 0 || dims.classes == 0 {
        return Err(NetError::BadConfig {
            detail: "channels and classes must be positive".into(),
        });
    }
    if dims.input_hw < 4 {
        return Err(NetError::BadConfig {
            detail: format!("input resolution {} too small", dims.input_hw),
        });
    }
    let space = OperatorSpace::preset(space_id);
    let kinds = standard_cell_kinds(dims.cells);
    let layouts = cell_layouts(&dims, &kinds)?;

    let mut store = ParamStore::new();
    let stem = build_stem_for(&dims, &mut store, rng);

    let mut cells = Vec::with_capacity(dims.cells);
    for (k_idx, layout) in layouts.iter().enumerate() {
        let mut banks = Vec::new();
        for j in 3..dims.nodes {
            let mut per_pred = Vec::new();
            for i in 1..j {
                let (in_ch, out_ch, stride) = layout.edge_shape(i);
                let mut per_op = Vec::new();
                for kind in space.kinds() {
                    let path = format!("cell{}.n{}.from{}.{}", k_idx + 1, j, i, kind.tag());
                    per_op.push(ops::build_operator(
                        *kind, in_ch, out_ch, stride, &mut store, &path, rng,
                    )?);
                }
                per_pred.push(per_op);
            }
            banks.push(per_pred);
        }
        cells.push(SuperCell {
            spec: CellSpec {
                index: k_idx + 1,
                kind: layout.kind,
                node_count: dims.nodes,
                width: layout.width,
            },
            banks,
        });
    }

    let classifier = build_classifier_for(&dims, layouts.last().unwrap(), &mut store, rng);
    let arch = ArchParams::uniform(dims.cells, dims.nodes, space.len());
    Ok(SuperNetwork {
        dims,
        space,
        layouts,
        cells,
        stem,
        classifier,
        arch,
        store,
    })
}

pub(crate) fn build_stem_for(dims: &NetDims, store: &mut ParamStore, rng: &mut impl Rng) -> Stem {
    let fan_in = dims.in_channels * 9;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = dims.channels * dims.in_channels * 9;
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    let conv = store.register(
        "stem.conv",
        Tensor::new(vec![dims.channels, dims.in_channels, 3, 3], data).unwrap(),
    );
    let gain = store.register(
        "stem.norm.gain",
        Tensor::new(vec![dims.channels], vec![1.0; dims.channels]).unwrap(),
    );
    let bias = store.register("stem.norm.bias", Tensor::zeros(&[dims.channels]));
    Stem {
        conv,
        norm: ops::NormParams { gain, bias },
    }
}

pub(crate) fn build_classifier_for(
    dims: &NetDims,
    last: &CellLayout,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Classifier {
    let features = (dims.nodes - 3) * last.width;
    let bound = 1.0 / (features as f64).sqrt();
    let wdata: Vec<f64> = (0..dims.classes * features)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    let bdata: Vec<f64> = (0..dims.classes).map(|_| rng.gen_range(-bound..bound)).collect();
    Classifier {
        weight: store.register(
            "classifier.weight",
            Tensor::new(vec![dims.classes, features], wdata).unwrap(),
        ),
        bias: store.register(
            "classifier.bias",
            Tensor::new(vec![dims.classes], bdata).unwrap(),
        ),
    }
}

impl SuperNetwork {
    /// Redraws every model parameter from its init distribution. Alphas,
    /// alive masks, and everything else are untouched.
    pub fn reinit_theta(&mut self, rng: &mut impl Rng) {
        reinit_store(&mut self.store, rng);
    }

    /// Records a full forward pass on a fresh tape.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardPass, NetError> {
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

        let mut alpha_ids = Vec::with_capacity(self.cells.len());
        let mut weight_ids = Vec::with_capacity(self.cells.len());
        let mut prev_prev = s;
        let mut prev = s;
        for (k_idx, cell) in self.cells.iter().enumerate() {
            let (out, aids, wids) =
                self.forward_cell(k_idx, cell, &mut tape, &mut binder, prev_prev, prev)?;
            alpha_ids.push(aids);
            weight_ids.push(wids);
            prev_prev = prev;
            prev = out;
        }

        let pooled = tape.global_avg_pool(prev)?;
        let w = binder.bind(&mut tape, &self.store, self.classifier.weight);
        let b = binder.bind(&mut tape, &self.store, self.classifier.bias);
        let logits = tape.linear(pooled, w, b)?;
        Ok(ForwardPass {
            tape,
            binder,
            logits,
            alpha_ids,
            weight_ids,
        })
    }

    fn forward_cell(
        &self,
        k_idx: usize,
        cell: &SuperCell,
        tape: &mut Tape,
        binder: &mut Binder,
        s0: TensorId,
        s1: TensorId,
    ) -> Result<(TensorId, Vec<TensorId>, Vec<TensorId>), NetError> {
        let n = self.dims.nodes;
        let num_ops = self.space.len();
        let mut nodes: Vec<TensorId> = vec![s0, s1];
        let mut alpha_ids = Vec::new();
        let mut weight_ids = Vec::new();
        for j in 3..n {
            let na = self.arch.node(k_idx, j);
            if na.alive_count() == 0 {
                return Err(NetError::DeadNode {
                    cell: k_idx,
                    node: j,
                });
            }
            let alpha_id = tape.leaf(Tensor::from_vec(na.alphas.clone()), true);
            let w_id = tape.masked_softmax(alpha_id, &na.alive)?;
            alpha_ids.push(alpha_id);
            weight_ids.push(w_id);

            let mut acc: Option<TensorId> = None;
            for i in 1..j {
                let x_i = nodes[i - 1];
                for o in 0..num_ops {
                    let e = self.arch.entry_index(i, o);
                    if !na.alive[e] {
                        continue;
                    }
                    let op = &cell.banks[j - 3][i - 1][o];
                    let y = ops::apply(op, tape, binder, &self.store, x_i)?;
                    let term = tape.scale_by_element(y, w_id, e)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term)?,
                        None => term,
                    });
                }
            }
            nodes.push(acc.expect("alive_count > 0 guarantees a term"));
        }
        let out = tape.concat(&nodes[2..])?;
        Ok((out, alpha_ids, weight_ids))
    }
}

pub(crate) fn apply_stem(
    stem: &Stem,
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    x: TensorId,
) -> Result<TensorId, NetError> {
    let w = binder.bind(tape, store, stem.conv);
    let y = tape.conv2d(x, w, 1, 1, 1, 1)?;
    let g = binder.bind(tape, store, stem.norm.gain);
    let b = binder.bind(tape, store, stem.norm.bias);
    Ok(tape.affine_channel_norm(y, g, b)?)
}

pub(crate) fn apply_classifier(
    classifier: &Classifier,
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    x: TensorId,
) -> Result<TensorId, NetError> {
    let pooled = tape.global_avg_pool(x)?;
    let w = binder.bind(tape, store, classifier.weight);
    let b = binder.bind(tape, store, classifier.bias);
    Ok(tape.linear(pooled, w, b)?)
}

/// Redraws every entry of a parameter store according to its role, derived
/// from the registration path: norm gains to 1, norm biases to 0, kernels
/// and linear weights to uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)). A linear
/// bias shares the fan-in of its sibling weight.
pub(crate) fn reinit_store(store: &mut ParamStore, rng: &mut impl Rng) {
    for idx in 0..store.len() {
        let id = crate::autodiff::ParamId(idx);
        let path = store.path(id).to_string();
        if path.ends_with(".norm.gain") {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 1.0);
            continue;
        }
        if path.ends_with(".norm.bias") {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let fan_in = {
            let shape = &store.get(id).shape;
            match shape.len() {
                4 => shape[1] * shape[2] * shape[3],
                2 => shape[1],
                _ => {
                    let weight_path = path.replace(".bias", ".weight");
                    store
                        .by_path(&weight_path)
                        .map(|w| store.get(w).shape[1])
                        .unwrap_or_else(|| store.get(id).numel())
                }
            }
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        store
            .get_mut(id)
            .data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-bound..bound));
    }
}
