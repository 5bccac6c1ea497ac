//! `fxdarts` command-line interface: search, discretize, eval, report.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use fxdarts::config::RunConfig;
use fxdarts::driver::{self, DiscretizeMode};
use fxdarts::genotype::Genotype;

/// Environment variable that prefixes relative output directories.
const OUT_ROOT_ENV: &str = "FXDARTS_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "fxdarts",
    about = "Topology-unconstrained architecture search with entropy-based super-network shrinking",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by subcommands: a key=value file plus overrides.
/// Precedence is CLI flags > --set pairs > config file > defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Path to a key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// RNG seed (overrides the file).
    #[arg(long)]
    seed: Option<u64>,

    /// Operator space preset: O1, O2, or O3.
    #[arg(long = "operator-space")]
    operator_space: Option<String>,

    /// Pruning threshold for dynamic discretization.
    #[arg(long)]
    epsilon: Option<f64>,

    /// Reinitialization rounds.
    #[arg(long)]
    rounds: Option<usize>,

    /// Epochs per round.
    #[arg(long)]
    epochs: Option<usize>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Extra key=value overrides (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{pair}`"))?;
            config.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(space) = &self.operator_space {
            config.set("space", space)?;
        }
        if let Some(eps) = self.epsilon {
            config.set("epsilon", &eps.to_string())?;
        }
        if let Some(rounds) = self.rounds {
            config.set("r_init", &rounds.to_string())?;
        }
        if let Some(epochs) = self.epochs {
            config.set("t_search", &epochs.to_string())?;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if config.out_dir.is_relative() {
            if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
                config.out_dir = PathBuf::from(root).join(&config.out_dir);
            }
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the shrinking search and write the run directory.
    Search(ConfigArgs),

    /// Derive a discrete architecture from a checkpoint.
    Discretize {
        /// Checkpoint JSON produced by `search`.
        checkpoint: PathBuf,

        /// dynamic (threshold pruning) or constrained (top-2 baseline).
        #[arg(long, default_value = "dynamic")]
        mode: String,

        #[arg(long, default_value_t = 0.02)]
        epsilon: f64,

        /// Output stem; writes <stem>.json and <stem>.dot.
        #[arg(long, default_value = "genotype")]
        out: PathBuf,
    },

    /// Retrain a genotype from scratch and report accuracy.
    Eval {
        /// Genotype JSON file.
        genotype: PathBuf,

        #[command(flatten)]
        config: ConfigArgs,

        /// Retraining epochs (overrides eval_epochs).
        #[arg(long)]
        train_epochs: Option<usize>,
    },

    /// Summarize a finished run directory.
    Report {
        run_dir: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Search(args) => {
            let config = args.resolve()?;
            let artifacts = driver::cmd_search(&config)?;
            println!("run directory: {}", artifacts.run_dir.display());
            println!(
                "delta_e = {:.6e}, steps/epoch = {}",
                artifacts.meta.delta_e, artifacts.meta.steps_per_epoch
            );
            println!(
                "entropy: {:.4} -> {:.4} ({} entries pruned)",
                artifacts.meta.initial_total_entropy,
                artifacts.meta.final_total_entropy,
                artifacts.meta.pruned_entries
            );
            for snap in &artifacts.meta.snapshots {
                println!(
                    "snapshot {}: {} edges, {} params, {} flops",
                    snap.label, snap.edges, snap.params, snap.flops
                );
            }
        }
        Command::Discretize {
            checkpoint,
            mode,
            epsilon,
            out,
        } => {
            let mode = match mode.as_str() {
                "dynamic" => DiscretizeMode::Dynamic,
                "constrained" => DiscretizeMode::Constrained,
                other => bail!("unknown mode `{other}` (expected dynamic or constrained)"),
            };
            if !(0.0..1.0).contains(&epsilon) {
                bail!("epsilon {epsilon} outside [0, 1)");
            }
            let genotype = driver::cmd_discretize(&checkpoint, epsilon, mode, &out)?;
            println!(
                "wrote {}.json and {}.dot ({} edges)",
                out.display(),
                out.display(),
                genotype.edge_count()
            );
        }
        Command::Eval {
            genotype,
            config,
            train_epochs,
        } => {
            let mut run_config = config.resolve()?;
            if let Some(epochs) = train_epochs {
                run_config.eval.epochs = epochs;
            }
            let text = std::fs::read_to_string(&genotype)
                .with_context(|| format!("reading {}", genotype.display()))?;
            let genotype = Genotype::from_json(&text)?;
            let out_path = run_config.out_dir.join("eval_report.json");
            let report = driver::cmd_eval(&genotype, &run_config, Some(&out_path))?;
            println!(
                "train acc {:.4}, test acc {:.4} over {} epochs",
                report.train_accuracy, report.test_accuracy, report.epochs
            );
            println!("{}", report.complexity.to_table());
            println!("wrote {}", out_path.display());
        }
        Command::Report { run_dir } => {
            let artifacts = driver::cmd_report(&run_dir)?;
            println!(
                "entropy {:.4} -> {:.4} across {} cells, {} snapshots",
                artifacts.summary.initial_total_entropy,
                artifacts.summary.final_total_entropy,
                artifacts.summary.cells.len(),
                artifacts.summary.snapshots.len()
            );
            println!("wrote {}", artifacts.summary_path.display());
            println!("wrote {}", artifacts.series_path.display());
        }
    }
    Ok(())
}
