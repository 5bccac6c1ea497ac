//! Discrete architecture descriptions and their JSON/DOT serializations.
//!
//! A genotype lists the retained (cell, from, to, operator) edges. Cells
//! may each have a unique structure and any number of inputs per node.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

use crate::ops::{OperatorKind, SpaceId};
use crate::supernet::CellKind;

#[derive(Debug, Error)]
pub enum GenotypeError {
    #[error("cell {cell}: computing node {node} has no incoming edges")]
    EmptyNode { cell: usize, node: usize },

    #[error("cell {cell}: edge {from}->{to} violates the DAG ordering")]
    BadEdge { cell: usize, from: usize, to: usize },

    #[error("cell {cell}: node {node} outside computing range 3..={max}")]
    BadNode { cell: usize, node: usize, max: usize },

    #[error("genotype JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeEdge {
    pub from: usize,
    pub to: usize,
    pub op: OperatorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeCell {
    /// 1-based cell index.
    pub k: usize,
    pub kind: CellKind,
    pub edges: Vec<GenotypeEdge>,
}

/// A discrete, possibly cell-unique architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub space: SpaceId,
    #[serde(rename = "N")]
    pub node_count: usize,
    pub cells: Vec<GenotypeCell>,
}

impl Genotype {
    /// Checks the structural invariants: every computing node has at least
    /// one incoming edge, and all edges point forward in the DAG.
    pub fn validate(&self) -> Result<(), GenotypeError> {
        let max_node = self.node_count - 1;
        for cell in &self.cells {
            for edge in &cell.edges {
                if edge.to < 3 || edge.to > max_node {
                    return Err(GenotypeError::BadNode {
                        cell: cell.k,
                        node: edge.to,
                        max: max_node,
                    });
                }
                if edge.from == 0 || edge.from >= edge.to {
                    return Err(GenotypeError::BadEdge {
                        cell: cell.k,
                        from: edge.from,
                        to: edge.to,
                    });
                }
            }
            for j in 3..=max_node {
                if !cell.edges.iter().any(|e| e.to == j) {
                    return Err(GenotypeError::EmptyNode {
                        cell: cell.k,
                        node: j,
                    });
                }
            }
        }
        Ok(())
    }

    /// Sorts edges into the canonical (cell, to, from, operator) order.
    pub fn canonicalize(&mut self) {
        let order = |k: OperatorKind| match k {
            OperatorKind::SkipConnect => 0,
            OperatorKind::SepConv3x3 => 1,
            OperatorKind::DilConv5x5 => 2,
        };
        for cell in &mut self.cells {
            cell.edges
                .sort_by_key(|e| (e.to, e.from, order(e.op)));
        }
        self.cells.sort_by_key(|c| c.k);
    }

    pub fn edge_count(&self) -> usize {
        self.cells.iter().map(|c| c.edges.len()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, GenotypeError> {
        let genotype: Genotype = serde_json::from_str(s)?;
        genotype.validate()?;
        Ok(genotype)
    }

    /// Graphviz DOT rendering: one subgraph per cell, edges labeled with
    /// the operator kind, and dashed edges marking the channel concat into
    /// the output node.
    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        writeln!(s, "digraph architecture {{").unwrap();
        writeln!(s, "  rankdir=LR;").unwrap();
        writeln!(s, "  node [shape=circle fontsize=10];").unwrap();
        for cell in &self.cells {
            let kind = match cell.kind {
                CellKind::Normal => "normal",
                CellKind::Reduction => "reduction",
            };
            writeln!(s, "  subgraph cluster_cell{} {{", cell.k).unwrap();
            writeln!(s, "    label=\"cell {} ({})\";", cell.k, kind).unwrap();
            for node in 1..=self.node_count {
                writeln!(s, "    c{}n{} [label=\"{}\"];", cell.k, node, node).unwrap();
            }
            for edge in &cell.edges {
                writeln!(
                    s,
                    "    c{k}n{f} -> c{k}n{t} [label=\"{op}\"];",
                    k = cell.k,
                    f = edge.from,
                    t = edge.to,
                    op = edge.op.tag()
                )
                .unwrap();
            }
            for j in 3..self.node_count {
                writeln!(
                    s,
                    "    c{k}n{j} -> c{k}n{n} [style=dashed arrowhead=none];",
                    k = cell.k,
                    j = j,
                    n = self.node_count
                )
                .unwrap();
            }
            writeln!(s, "  }}").unwrap();
        }
        writeln!(s, "}}").unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Genotype {
        Genotype {
            space: SpaceId::O2,
            node_count: 5,
            cells: vec![GenotypeCell {
                k: 1,
                kind: CellKind::Normal,
                edges: vec![
                    GenotypeEdge {
                        from: 1,
                        to: 3,
                        op: OperatorKind::SepConv3x3,
                    },
                    GenotypeEdge {
                        from: 2,
                        to: 4,
                        op: OperatorKind::SkipConnect,
                    },
                ],
            }],
        }
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let g = sample();
        let json = g.to_json();
        let parsed = Genotype::from_json(&json).unwrap();
        assert_eq!(parsed, g);
        assert_eq!(parsed.to_json(), json);
    }

    #[test]
    fn json_uses_short_operator_tags() {
        let json = sample().to_json();
        assert!(json.contains("\"sep3\""));
        assert!(json.contains("\"skip\""));
        assert!(json.contains("\"space\": \"O2\""));
        assert!(json.contains("\"N\": 5"));
    }

    #[test]
    fn empty_node_rejected() {
        let mut g = sample();
        g.cells[0].edges.remove(1); // node 4 loses its only edge
        assert!(matches!(
            g.validate(),
            Err(GenotypeError::EmptyNode { node: 4, .. })
        ));
    }

    #[test]
    fn backward_edge_rejected() {
        let mut g = sample();
        g.cells[0].edges.push(GenotypeEdge {
            from: 4,
            to: 3,
            op: OperatorKind::SkipConnect,
        });
        assert!(matches!(g.validate(), Err(GenotypeError::BadEdge { .. })));
    }

    #[test]
    fn dot_output_is_balanced_and_labeled() {
        let dot = sample().to_dot();
        assert!(dot.starts_with("digraph"));
        assert_eq!(
            dot.matches('{').count(),
            dot.matches('}').count(),
            "unbalanced braces"
        );
        assert!(dot.contains("subgraph cluster_cell1"));
        assert!(dot.contains("label=\"sep3\""));
    }
}
