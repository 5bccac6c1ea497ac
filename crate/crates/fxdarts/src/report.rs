//! Entropy CSV emission/parsing and run summaries.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

use crate::ess::StepRow;

pub const ENTROPY_CSV_HEADER: &str = "round,epoch,step,cell,entropy,lambda,loss_ce,loss_all";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("entropy CSV line {line}: {detail}")]
    BadCsv { line: usize, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn rows_to_csv(rows: &[StepRow]) -> String {
    let mut s = String::with_capacity(rows.len() * 48 + 64);
    s.push_str(ENTROPY_CSV_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.round, r.epoch, r.step, r.cell, r.entropy, r.lambda, r.loss_ce, r.loss_all
        )
        .unwrap();
    }
    s
}

pub fn write_entropy_csv(path: &Path, rows: &[StepRow]) -> Result<(), ReportError> {
    std::fs::write(path, rows_to_csv(rows)).map_err(io_err(path))
}

pub fn read_entropy_csv(path: &Path) -> Result<Vec<StepRow>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line != ENTROPY_CSV_HEADER {
                return Err(ReportError::BadCsv {
                    line: 1,
                    detail: format!("unexpected header `{line}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(ReportError::BadCsv {
                line: idx + 1,
                detail: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let parse_u = |f: &str| -> Result<usize, ReportError> {
            f.parse().map_err(|_| ReportError::BadCsv {
                line: idx + 1,
                detail: format!("bad integer `{f}`"),
            })
        };
        let parse_f = |f: &str| -> Result<f64, ReportError> {
            f.parse().map_err(|_| ReportError::BadCsv {
                line: idx + 1,
                detail: format!("bad float `{f}`"),
            })
        };
        rows.push(StepRow {
            round: parse_u(fields[0])?,
            epoch: parse_u(fields[1])?,
            step: parse_u(fields[2])?,
            cell: parse_u(fields[3])?,
            entropy: parse_f(fields[4])?,
            lambda: parse_f(fields[5])?,
            loss_ce: parse_f(fields[6])?,
            loss_all: parse_f(fields[7])?,
        });
    }
    Ok(rows)
}

/// Per-snapshot complexity entry in the run summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub label: String,
    pub cumulative_epochs: usize,
    pub params: u64,
    pub flops: u64,
    pub edges: usize,
    pub alive_entries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSeries {
    pub cell: usize,
    pub initial_entropy: f64,
    pub final_entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub initial_total_entropy: f64,
    pub final_total_entropy: f64,
    pub cells: Vec<CellSeries>,
    pub snapshots: Vec<SnapshotSummary>,
}

/// Downsamples the per-cell entropy series to at most `max_points` rows
/// per cell, preserving first and last.
pub fn downsample_series(rows: &[StepRow], max_points: usize) -> Vec<StepRow> {
    let cells: Vec<usize> = {
        let mut c: Vec<usize> = rows.iter().map(|r| r.cell).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut out = Vec::new();
    for cell in cells {
        let series: Vec<&StepRow> = rows.iter().filter(|r| r.cell == cell).collect();
        if series.len() <= max_points {
            out.extend(series.into_iter().cloned());
            continue;
        }
        let stride = (series.len() - 1) as f64 / (max_points - 1) as f64;
        let mut last = usize::MAX;
        for p in 0..max_points {
            let idx = (p as f64 * stride).round() as usize;
            let idx = idx.min(series.len() - 1);
            if idx != last {
                out.push(series[idx].clone());
                last = idx;
            }
        }
    }
    out
}

/// Builds the summary from parsed CSV rows plus per-snapshot complexity.
pub fn summarize(rows: &[StepRow], snapshots: Vec<SnapshotSummary>) -> RunSummary {
    let mut cells: Vec<usize> = rows.iter().map(|r| r.cell).collect();
    cells.sort_unstable();
    cells.dedup();
    let mut cell_series = Vec::new();
    let mut initial_total = 0.0;
    let mut final_total = 0.0;
    for cell in cells {
        let first = rows.iter().find(|r| r.cell == cell);
        let last = rows.iter().rev().find(|r| r.cell == cell);
        if let (Some(f), Some(l)) = (first, last) {
            initial_total += f.entropy;
            final_total += l.entropy;
            cell_series.push(CellSeries {
                cell,
                initial_entropy: f.entropy,
                final_entropy: l.entropy,
            });
        }
    }
    RunSummary {
        initial_total_entropy: initial_total,
        final_total_entropy: final_total,
        cells: cell_series,
        snapshots,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, cell: usize, entropy: f64) -> StepRow {
        StepRow {
            round: 1,
            epoch: 1,
            step,
            cell,
            entropy,
            lambda: 1e-4,
            loss_ce: 1.0,
            loss_all: 1.0,
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(1, 1, 1.5), row(1, 2, 2.5), row(2, 1, 1.25)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("entropy.csv");
        write_entropy_csv(&path, &rows).unwrap();
        let parsed = read_entropy_csv(&path).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn downsample_keeps_endpoints() {
        let rows: Vec<StepRow> = (0..100).map(|i| row(i, 1, i as f64)).collect();
        let ds = downsample_series(&rows, 10);
        assert!(ds.len() <= 10);
        assert_eq!(ds.first().unwrap().entropy, 0.0);
        assert_eq!(ds.last().unwrap().entropy, 99.0);
    }

    #[test]
    fn summary_tracks_first_and_last_entropy_per_cell() {
        let rows = vec![row(1, 1, 2.0), row(2, 1, 1.0), row(1, 2, 3.0), row(2, 2, 0.5)];
        let summary = summarize(&rows, vec![]);
        assert_eq!(summary.initial_total_entropy, 5.0);
        assert_eq!(summary.final_total_entropy, 1.5);
    }
}
