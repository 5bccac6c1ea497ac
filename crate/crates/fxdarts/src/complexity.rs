//! Closed-form parameter and FLOP accounting for genotypes.
//!
//! Counts follow the rebuilt network exactly: convolution kernels per
//! `op_param_count`, plus 2*C scalars per channel-affine norm, plus the
//! stem and classifier. FLOPs use the 2x multiply-accumulate convention
//! and cover convolutions and the final linear layer only, matching the
//! MAC counter instrumented into the tensor engine.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::discretize::RebuildSpec;
use crate::genotype::{Genotype, GenotypeError};
use crate::ops::{op_flop_count, op_norm_param_count, op_param_count};
use crate::supernet::{cell_layouts, CellKind, NetDims, NetError};

#[derive(Debug, thiserror::Error)]
pub enum ComplexityError {
    #[error(transparent)]
    Genotype(#[from] GenotypeError),

    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub label: String,
    pub params: u64,
    pub flops: u64,
    pub edges: usize,
}

/// Params/FLOPs totals with a per-component breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub params: u64,
    pub flops: u64,
    pub edge_count: usize,
    pub input_hw: usize,
    pub breakdown: Vec<BreakdownRow>,
}

impl ComplexityReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<16} {:>12} {:>14} {:>7}\n",
            "component", "params", "flops", "edges"
        ));
        for row in &self.breakdown {
            s.push_str(&format!(
                "{:<16} {:>12} {:>14} {:>7}\n",
                row.label, row.params, row.flops, row.edges
            ));
        }
        s.push_str(&format!(
            "{:<16} {:>12} {:>14} {:>7}\n",
            "total", self.params, self.flops, self.edge_count
        ));
        s
    }
}

fn dims_for(genotype: &Genotype, spec: &RebuildSpec) -> NetDims {
    NetDims {
        cells: genotype.cells.len(),
        nodes: genotype.node_count,
        channels: spec.channels,
        in_channels: spec.in_channels,
        input_hw: spec.input_hw,
        classes: spec.classes,
    }
}

/// Full report: totals equal the sum of the breakdown rows.
pub fn complexity_report(
    genotype: &Genotype,
    spec: &RebuildSpec,
) -> Result<ComplexityReport, ComplexityError> {
    genotype.validate()?;
    let dims = dims_for(genotype, spec);
    let kinds: Vec<CellKind> = genotype.cells.iter().map(|c| c.kind).collect();
    let layouts = cell_layouts(&dims, &kinds)?;

    let mut breakdown = Vec::new();
    let stem_params = 9 * spec.in_channels * spec.channels + 2 * spec.channels;
    let stem_flops =
        2 * (9 * spec.in_channels * spec.channels * spec.input_hw * spec.input_hw) as u64;
    breakdown.push(BreakdownRow {
        label: "stem".into(),
        params: stem_params as u64,
        flops: stem_flops,
        edges: 0,
    });

    for (cell, layout) in genotype.cells.iter().zip(&layouts) {
        let mut params = 0u64;
        let mut flops = 0u64;
        for edge in &cell.edges {
            let (in_ch, out_ch, stride) = layout.edge_shape(edge.from);
            params += (op_param_count(edge.op, in_ch, out_ch, stride)
                + op_norm_param_count(edge.op, in_ch, out_ch, stride)) as u64;
            flops += op_flop_count(edge.op, in_ch, out_ch, stride, layout.res, layout.res);
        }
        breakdown.push(BreakdownRow {
            label: format!("cell{}", cell.k),
            params,
            flops,
            edges: cell.edges.len(),
        });
    }

    let last = layouts.last().unwrap();
    let features = (dims.nodes - 3) * last.width;
    let cls_params = features * spec.classes + spec.classes;
    let cls_flops = 2 * (features * spec.classes) as u64;
    breakdown.push(BreakdownRow {
        label: "classifier".into(),
        params: cls_params as u64,
        flops: cls_flops,
        edges: 0,
    });

    Ok(ComplexityReport {
        params: breakdown.iter().map(|r| r.params).sum(),
        flops: breakdown.iter().map(|r| r.flops).sum(),
        edge_count: genotype.edge_count(),
        input_hw: spec.input_hw,
        breakdown,
    })
}

/// Exact scalar count of `rebuild_discrete`'s parameters, without building
/// any tensors.
pub fn count_params(genotype: &Genotype, spec: &RebuildSpec) -> Result<u64, ComplexityError> {
    Ok(complexity_report(genotype, spec)?.params)
}

/// FLOPs of one single-sample forward pass (2x MACs, conv + linear only),
/// with every operator evaluated at its actual resolution.
pub fn count_flops(genotype: &Genotype, spec: &RebuildSpec) -> Result<u64, ComplexityError> {
    Ok(complexity_report(genotype, spec)?.flops)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructureStats {
    /// incoming-edge count -> number of computing nodes with that fan-in
    pub edges_per_node: BTreeMap<usize, usize>,
    /// operator tag -> retained-edge count
    pub operator_frequency: BTreeMap<String, usize>,
    /// No two cells share an identical edge set.
    pub cells_unique: bool,
}

pub fn structure_stats(genotype: &Genotype) -> StructureStats {
    let mut edges_per_node = BTreeMap::new();
    let mut operator_frequency = BTreeMap::new();
    for cell in &genotype.cells {
        for j in 3..genotype.node_count {
            let count = cell.edges.iter().filter(|e| e.to == j).count();
            *edges_per_node.entry(count).or_insert(0) += 1;
        }
        for edge in &cell.edges {
            *operator_frequency
                .entry(edge.op.tag().to_string())
                .or_insert(0) += 1;
        }
    }
    let mut sorted: Vec<Vec<(usize, usize, &str)>> = genotype
        .cells
        .iter()
        .map(|c| {
            let mut edges: Vec<(usize, usize, &str)> =
                c.edges.iter().map(|e| (e.to, e.from, e.op.tag())).collect();
            edges.sort();
            edges
        })
        .collect();
    sorted.sort();
    let cells_unique = sorted.windows(2).all(|w| w[0] != w[1]);
    StructureStats {
        edges_per_node,
        operator_frequency,
        cells_unique,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::{GenotypeCell, GenotypeEdge};
    use crate::ops::{OperatorKind, SpaceId};

    fn all_skip_normal_genotype() -> Genotype {
        // N = 4 keeps cell output channels equal to the cell width, and
        // all-normal cells keep every edge an identity: no projections.
        let cells = (1..=3)
            .map(|k| GenotypeCell {
                k,
                kind: CellKind::Normal,
                edges: vec![
                    GenotypeEdge {
                        from: 1,
                        to: 3,
                        op: OperatorKind::SkipConnect,
                    },
                    GenotypeEdge {
                        from: 2,
                        to: 3,
                        op: OperatorKind::SkipConnect,
                    },
                ],
            })
            .collect();
        Genotype {
            space: SpaceId::O1,
            node_count: 4,
            cells,
        }
    }

    #[test]
    fn all_skip_genotype_counts_stem_and_classifier_only() {
        let spec = RebuildSpec {
            channels: 8,
            in_channels: 3,
            input_hw: 8,
            classes: 4,
        };
        let g = all_skip_normal_genotype();
        let params = count_params(&g, &spec).unwrap();
        let stem = 9 * 3 * 8 + 2 * 8;
        let classifier = 8 * 4 + 4;
        assert_eq!(params, (stem + classifier) as u64);
    }

    #[test]
    fn skip_identity_edges_contribute_zero_flops() {
        let spec = RebuildSpec {
            channels: 8,
            in_channels: 3,
            input_hw: 8,
            classes: 4,
        };
        let report = complexity_report(&all_skip_normal_genotype(), &spec).unwrap();
        for row in report.breakdown.iter().filter(|r| r.label.starts_with("cell")) {
            assert_eq!(row.flops, 0);
            assert_eq!(row.params, 0);
        }
    }

    #[test]
    fn one_sep_conv_edge_adds_kernel_plus_norm_params() {
        let spec = RebuildSpec {
            channels: 16,
            in_channels: 3,
            input_hw: 8,
            classes: 4,
        };
        let base = all_skip_normal_genotype();
        let mut with_conv = base.clone();
        with_conv.cells[0].edges.push(GenotypeEdge {
            from: 1,
            to: 3,
            op: OperatorKind::SepConv3x3,
        });
        let spec16 = spec;
        let delta = count_params(&with_conv, &spec16).unwrap()
            - count_params(&base, &spec16).unwrap();
        assert_eq!(delta, 400 + 2 * 16);
    }

    #[test]
    fn doubling_resolution_quadruples_conv_flops() {
        let mut g = all_skip_normal_genotype();
        g.cells[0].edges.push(GenotypeEdge {
            from: 1,
            to: 3,
            op: OperatorKind::SepConv3x3,
        });
        let spec8 = RebuildSpec {
            channels: 8,
            in_channels: 3,
            input_hw: 8,
            classes: 4,
        };
        let spec16 = RebuildSpec {
            input_hw: 16,
            ..spec8
        };
        let conv_flops = |spec: &RebuildSpec| {
            let report = complexity_report(&g, spec).unwrap();
            report
                .breakdown
                .iter()
                .find(|r| r.label == "cell1")
                .unwrap()
                .flops
        };
        assert_eq!(conv_flops(&spec16), 4 * conv_flops(&spec8));
    }

    #[test]
    fn removing_an_edge_never_increases_cost() {
        let spec = RebuildSpec {
            channels: 8,
            in_channels: 3,
            input_hw: 8,
            classes: 4,
        };
        let mut g = all_skip_normal_genotype();
        g.cells[0].edges.push(GenotypeEdge {
            from: 2,
            to: 3,
            op: OperatorKind::SepConv3x3,
        });
        let p0 = count_params(&g, &spec).unwrap();
        let f0 = count_flops(&g, &spec).unwrap();
        let mut smaller = g.clone();
        smaller.cells[0].edges.pop();
        assert!(count_params(&smaller, &spec).unwrap() <= p0);
        assert!(count_flops(&smaller, &spec).unwrap() <= f0);
    }

    #[test]
    fn stats_count_operators_and_uniqueness() {
        let g = all_skip_normal_genotype();
        let stats = structure_stats(&g);
        assert!(!stats.cells_unique, "three identical cells");
        assert_eq!(stats.operator_frequency["skip"], 6);
        assert_eq!(
            stats.operator_frequency.values().sum::<usize>(),
            g.edge_count()
        );
        assert_eq!(stats.edges_per_node[&2], 3);
    }
}
