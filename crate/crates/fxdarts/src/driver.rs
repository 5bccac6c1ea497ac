//! End-to-end command implementations shared by the CLI and the test
//! suites: search, discretize, eval, and report.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::autodiff::optim::{clip_grad_norm, cosine_lr, SgdParams, SgdState};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::complexity::{complexity_report, ComplexityError, ComplexityReport};
use crate::config::RunConfig;
use crate::data::{augment_batch, DataError, Dataset};
use crate::discretize::{
    constrained_discretize, dynamic_discretize, extract_genotype, rebuild_discrete,
    DiscreteNetwork, DiscretizeError,
};
use crate::ess::{run_search_with_hook, EssError, SearchOutcome};
use crate::genotype::{Genotype, GenotypeError};
use crate::report::{
    downsample_series, read_entropy_csv, rows_to_csv, summarize, write_entropy_csv, ReportError,
    SnapshotSummary,
};
use crate::supernet::{init_supernet, NetError};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ess(#[from] EssError),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
    #[error(transparent)]
    Genotype(#[from] GenotypeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Complexity(#[from] ComplexityError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Tensor(#[from] crate::autodiff::TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("run directory {0} is missing {1}")]
    MissingArtifact(PathBuf, &'static str),
}

fn write_file(path: &Path, contents: &str) -> Result<(), DriverError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| DriverError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| DriverError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Deterministic sub-stream seeds derived from the run seed.
fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt))
}

/// Deterministic metadata written next to the search artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchMeta {
    pub delta_e: f64,
    pub steps_per_epoch: usize,
    pub initial_total_entropy: f64,
    pub final_total_entropy: f64,
    pub max_ce_grad_norm: f64,
    pub pruned_entries: usize,
    pub snapshots: Vec<SnapshotSummary>,
}

pub struct SearchArtifacts {
    pub run_dir: PathBuf,
    pub outcome: SearchOutcome,
    pub meta: SearchMeta,
}

/// Runs a full search and writes the run directory: resolved config,
/// entropy CSV, per-round genotype snapshots (JSON + DOT), per-round
/// checkpoints, and a final checkpoint.
pub fn cmd_search(config: &RunConfig) -> Result<SearchArtifacts, DriverError> {
    let run_dir = config.out_dir.clone();
    let dataset = Dataset::generate(&config.dataset, config.seed)?;
    // Image folders determine their own class count and channel layout.
    let mut dims = config.net_dims();
    dims.classes = dataset.classes;
    dims.in_channels = dataset.channels;
    let mut net = init_supernet(dims, config.space, &mut stream(config.seed, 1))?;
    let mut rng = stream(config.seed, 2);

    let ckpt_dir = run_dir.join("checkpoints");
    let t_search = config.ess.t_search;
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let outcome = run_search_with_hook(
        &mut net,
        &dataset,
        config.batch_size,
        &config.ess,
        config.augment,
        &mut rng,
        &mut |round, net, state, theta_opt, alpha_opt| {
            checkpoints.push(Checkpoint::from_network(
                net,
                state.lambda.clone(),
                Some(theta_opt.clone()),
                Some(alpha_opt.clone()),
                round,
                round * t_search,
            ));
            Ok(())
        },
    )?;

    write_file(&run_dir.join("config.txt"), &config.to_kv_string())?;
    write_entropy_csv(&run_dir.join("entropy.csv"), &outcome.rows)?;

    let spec = config.rebuild_spec();
    let mut snapshot_summaries = Vec::new();
    for snapshot in &outcome.archive {
        let json_path = run_dir
            .join("snapshots")
            .join(format!("genotype_{}.json", snapshot.label));
        write_file(&json_path, &snapshot.genotype.to_json())?;
        let dot_path = run_dir
            .join("snapshots")
            .join(format!("genotype_{}.dot", snapshot.label));
        write_file(&dot_path, &snapshot.genotype.to_dot())?;
        let report = complexity_report(&snapshot.genotype, &spec)?;
        snapshot_summaries.push(SnapshotSummary {
            label: snapshot.label.clone(),
            cumulative_epochs: snapshot.cumulative_epochs,
            params: report.params,
            flops: report.flops,
            edges: snapshot.genotype.edge_count(),
            alive_entries: snapshot.arch.total_alive(),
        });
    }

    for (idx, ckpt) in checkpoints.iter().enumerate() {
        ckpt.save(&ckpt_dir.join(format!("checkpoint_{}.json", outcome.archive[idx].label)))?;
        if idx + 1 == checkpoints.len() {
            ckpt.save(&run_dir.join("checkpoint.json"))?;
        }
    }

    let meta = SearchMeta {
        delta_e: outcome.delta_e,
        steps_per_epoch: outcome.steps_per_epoch,
        initial_total_entropy: outcome.initial_entropy.total,
        final_total_entropy: outcome.final_entropy.total,
        max_ce_grad_norm: outcome.max_ce_grad_norm,
        pruned_entries: outcome.prune_log.len(),
        snapshots: snapshot_summaries.clone(),
    };
    write_file(
        &run_dir.join("search_meta.json"),
        &serde_json::to_string_pretty(&meta)?,
    )?;

    Ok(SearchArtifacts {
        run_dir,
        outcome,
        meta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscretizeMode {
    Dynamic,
    Constrained,
}

/// Loads a checkpoint, discretizes it, and writes genotype JSON + DOT next
/// to the requested output stem.
pub fn cmd_discretize(
    checkpoint_path: &Path,
    epsilon: f64,
    mode: DiscretizeMode,
    out_stem: &Path,
) -> Result<Genotype, DriverError> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let mut net = ckpt.restore()?;
    let genotype = match mode {
        DiscretizeMode::Dynamic => {
            dynamic_discretize(&mut net, epsilon);
            extract_genotype(&net)?
        }
        DiscretizeMode::Constrained => constrained_discretize(&net)?,
    };
    genotype.validate()?;
    write_file(&out_stem.with_extension("json"), &genotype.to_json())?;
    write_file(&out_stem.with_extension("dot"), &genotype.to_dot())?;
    Ok(genotype)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_train_loss: f64,
    pub epochs: usize,
    pub complexity: ComplexityReport,
}

/// Retrains a rebuilt discrete network from scratch and reports accuracy
/// plus complexity.
pub fn cmd_eval(
    genotype: &Genotype,
    config: &RunConfig,
    out_path: Option<&Path>,
) -> Result<EvalReport, DriverError> {
    genotype.validate()?;
    let dataset = Dataset::generate(&config.dataset, config.seed)?;
    let mut spec = config.rebuild_spec();
    spec.classes = dataset.classes;
    spec.in_channels = dataset.channels;
    let mut net = rebuild_discrete(genotype, &spec, &mut stream(config.seed, 3))?;
    let mut rng = stream(config.seed, 4);
    let final_train_loss = train_discrete(&mut net, &dataset, config, &mut rng)?;
    let train_accuracy = accuracy(&net, &dataset, &dataset.train_idx, config.eval.batch_size)?;
    let test_accuracy = if dataset.test_idx.is_empty() {
        0.0
    } else {
        accuracy(&net, &dataset, &dataset.test_idx, config.eval.batch_size)?
    };
    let report = EvalReport {
        train_accuracy,
        test_accuracy,
        final_train_loss,
        epochs: config.eval.epochs,
        complexity: complexity_report(genotype, &spec)?,
    };
    if let Some(path) = out_path {
        write_file(path, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// SGD + momentum + cosine decay to zero + global-norm clipping.
pub fn train_discrete(
    net: &mut DiscreteNetwork,
    dataset: &Dataset,
    config: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, DriverError> {
    let eval = &config.eval;
    let mut sgd = SgdState::new(&net.store.lens());
    let mut last_loss = f64::NAN;
    for epoch in 0..eval.epochs {
        let lr = cosine_lr(eval.lr, epoch, eval.epochs);
        let hp = SgdParams {
            lr,
            momentum: eval.momentum,
            weight_decay: eval.weight_decay,
        };
        for batch_idx in dataset.epoch_batches(eval.batch_size, rng) {
            let (mut batch, labels) = dataset.batch(&batch_idx);
            if config.augment {
                augment_batch(&mut batch, rng);
            }
            let (mut tape, binder, logits) = net.forward(&batch)?;
            let ce = tape.cross_entropy(logits, &labels)?;
            tape.backward(ce)?;
            last_loss = tape.value(ce).item();

            let bound: Vec<(crate::autodiff::ParamId, crate::autodiff::TensorId)> =
                binder.bound_params().collect();
            let mut grads: Vec<Vec<f64>> =
                bound.iter().map(|&(_, tid)| tape.grad(tid).to_vec()).collect();
            clip_grad_norm(&mut grads, eval.clip);
            for ((pid, _), grad) in bound.iter().zip(&grads) {
                let p = &mut net.store.get_mut(*pid).data;
                let vel = &mut sgd.velocity[pid.0];
                for i in 0..p.len() {
                    let g = grad[i] + hp.weight_decay * p[i];
                    vel[i] = hp.momentum * vel[i] + g;
                    p[i] -= hp.lr * vel[i];
                }
            }
        }
    }
    Ok(last_loss)
}

/// Fraction of correctly classified samples among `indices`.
pub fn accuracy(
    net: &DiscreteNetwork,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64, DriverError> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = dataset.batch(chunk);
        let (tape, _, logits) = net.forward(&batch)?;
        let out = tape.value(logits);
        let classes = out.shape[1];
        for (i, &label) in labels.iter().enumerate() {
            let row = &out.data[i * classes..(i + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(c, _)| c)
                .unwrap();
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

pub struct ReportArtifacts {
    pub summary: crate::report::RunSummary,
    pub series_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Builds plot data and a summary from a finished run directory.
pub fn cmd_report(run_dir: &Path) -> Result<ReportArtifacts, DriverError> {
    let csv_path = run_dir.join("entropy.csv");
    if !csv_path.exists() {
        return Err(DriverError::MissingArtifact(
            run_dir.to_path_buf(),
            "entropy.csv",
        ));
    }
    let rows = read_entropy_csv(&csv_path)?;
    let meta_path = run_dir.join("search_meta.json");
    let snapshots: Vec<SnapshotSummary> = if meta_path.exists() {
        let meta: SearchMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path).map_err(
            |source| DriverError::Io {
                path: meta_path.clone(),
                source,
            },
        )?)
        .map_err(ReportError::from)?;
        meta.snapshots
    } else {
        Vec::new()
    };

    let report_dir = run_dir.join("report");
    let series = downsample_series(&rows, 200);
    let series_path = report_dir.join("entropy_series.csv");
    write_file(&series_path, &rows_to_csv(&series))?;
    let summary = summarize(&rows, snapshots);
    let summary_path = report_dir.join("summary.json");
    write_file(&summary_path, &serde_json::to_string_pretty(&summary)?)?;
    Ok(ReportArtifacts {
        summary,
        series_path,
        summary_path,
    })
}

impl From<serde_json::Error> for DriverError {
    fn from(e: serde_json::Error) -> Self {
        DriverError::Report(ReportError::from(e))
    }
}
