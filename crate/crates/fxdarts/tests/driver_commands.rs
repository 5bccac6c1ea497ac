//! End-to-end command tests: run directory layout, reproducibility,
//! discretization from checkpoints, retraining, and reporting.

use std::path::Path;

use fxdarts::config::RunConfig;
use fxdarts::data::{Dataset, DatasetKind};
use fxdarts::discretize::constrained_discretize;
use fxdarts::driver::{cmd_discretize, cmd_eval, cmd_report, cmd_search, DiscretizeMode};
use fxdarts::genotype::Genotype;
use fxdarts::supernet::init_supernet;
use fxdarts::SpaceId;

/// Small, fast configuration for command tests.
fn fast_config(out_dir: &Path, seed: u64) -> RunConfig {
    let mut config = RunConfig::default();
    config.seed = seed;
    config.dataset.samples = 160;
    config.batch_size = 16;
    config.cells = 3;
    config.nodes = 4;
    config.init_channels = 4;
    config.ess.t_search = 4;
    config.ess.r_init = 2;
    config.out_dir = out_dir.to_path_buf();
    config
}

#[test]
fn search_writes_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = fast_config(&run_dir, 7);
    let artifacts = cmd_search(&config).unwrap();

    assert!(run_dir.join("config.txt").exists());
    assert!(run_dir.join("entropy.csv").exists());
    assert!(run_dir.join("checkpoint.json").exists());
    assert!(run_dir.join("search_meta.json").exists());
    for label in ["4E", "8E"] {
        assert!(run_dir.join(format!("snapshots/genotype_{label}.json")).exists());
        assert!(run_dir.join(format!("snapshots/genotype_{label}.dot")).exists());
        assert!(run_dir
            .join(format!("checkpoints/checkpoint_{label}.json"))
            .exists());
    }
    assert_eq!(artifacts.outcome.archive.len(), 2);

    // Saved config round-trips to the resolved configuration.
    let parsed = RunConfig::load(&run_dir.join("config.txt")).unwrap();
    assert_eq!(parsed, config);

    // Nothing is written outside the run directory (the temp dir contains
    // only the run dir).
    let top: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(top.len(), 1);
}

#[test]
fn identical_seeds_give_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    cmd_search(&fast_config(&run_a, 11)).unwrap();
    cmd_search(&fast_config(&run_b, 11)).unwrap();

    let csv_a = std::fs::read(run_a.join("entropy.csv")).unwrap();
    let csv_b = std::fs::read(run_b.join("entropy.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "entropy CSVs must be byte-identical");

    for label in ["4E", "8E"] {
        let ga = std::fs::read(run_a.join(format!("snapshots/genotype_{label}.json"))).unwrap();
        let gb = std::fs::read(run_b.join(format!("snapshots/genotype_{label}.json"))).unwrap();
        assert_eq!(ga, gb, "genotype JSONs must be byte-identical");
    }

    let run_c = dir.path().join("c");
    cmd_search(&fast_config(&run_c, 12)).unwrap();
    let csv_c = std::fs::read(run_c.join("entropy.csv")).unwrap();
    assert_ne!(csv_a, csv_c, "different seeds should diverge");
}

#[test]
fn discretize_command_reads_checkpoints_and_writes_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    cmd_search(&fast_config(&run_dir, 13)).unwrap();

    let out_stem = dir.path().join("derived").join("arch");
    let genotype = cmd_discretize(
        &run_dir.join("checkpoint.json"),
        0.02,
        DiscretizeMode::Dynamic,
        &out_stem,
    )
    .unwrap();
    genotype.validate().unwrap();
    let json = std::fs::read_to_string(out_stem.with_extension("json")).unwrap();
    assert_eq!(Genotype::from_json(&json).unwrap(), genotype);
    let dot = std::fs::read_to_string(out_stem.with_extension("dot")).unwrap();
    assert!(dot.starts_with("digraph"));
    assert_eq!(dot.matches('{').count(), dot.matches('}').count());

    // Constrained mode keeps exactly two inputs per computing node.
    let out_stem2 = dir.path().join("derived").join("baseline");
    let constrained = cmd_discretize(
        &run_dir.join("checkpoint.json"),
        0.02,
        DiscretizeMode::Constrained,
        &out_stem2,
    )
    .unwrap();
    for cell in &constrained.cells {
        for j in 3..constrained.node_count {
            assert_eq!(cell.edges.iter().filter(|e| e.to == j).count(), 2);
        }
    }
}

#[test]
fn eval_reaches_high_train_accuracy_on_blobs() {
    // A small rebuilt network separates the synthetic blob classes to at
    // least 95% train accuracy within 30 epochs. The alphas are biased
    // toward the separable convolution so the baseline keeps conv edges
    // (an all-skip network cannot see spatial structure through the
    // global pool).
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(41);
    let mut net = init_supernet(
        fxdarts::supernet::NetDims {
            cells: 3,
            nodes: 4,
            channels: 8,
            in_channels: 3,
            input_hw: 8,
            classes: 4,
        },
        SpaceId::O2,
        &mut rng,
    )
    .unwrap();
    for k in 0..3 {
        let node = net.arch.node_mut(k, 3);
        for i in 0..2 {
            node.alphas[i * 2 + 1] = 1.0; // favor sep3 on every edge
        }
    }
    let genotype = constrained_discretize(&net).unwrap();
    assert!(genotype
        .cells
        .iter()
        .all(|c| c.edges.iter().all(|e| e.op == fxdarts::OperatorKind::SepConv3x3)));

    let dir = tempfile::tempdir().unwrap();
    let mut config = fast_config(&dir.path().join("eval"), 42);
    config.dataset.samples = 256;
    config.init_channels = 8;
    config.eval.epochs = 30;
    let report = cmd_eval(&genotype, &config, Some(&config.out_dir.join("eval_report.json"))).unwrap();
    assert!(
        report.train_accuracy >= 0.95,
        "train accuracy {} below 0.95",
        report.train_accuracy
    );
    assert!(config.out_dir.join("eval_report.json").exists());
    assert_eq!(
        report.complexity.params,
        fxdarts::complexity::count_params(&genotype, &config.rebuild_spec()).unwrap()
    );
}

#[test]
fn report_summarizes_entropy_and_complexity_trend() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    cmd_search(&fast_config(&run_dir, 17)).unwrap();

    let artifacts = cmd_report(&run_dir).unwrap();
    assert!(artifacts.summary_path.exists());
    assert!(artifacts.series_path.exists());
    assert_eq!(artifacts.summary.snapshots.len(), 2);
    assert!(
        artifacts.summary.final_total_entropy < artifacts.summary.initial_total_entropy,
        "entropy must decrease over a completed run"
    );
    // Complexity trend over snapshots is non-increasing.
    let params: Vec<u64> = artifacts.summary.snapshots.iter().map(|s| s.params).collect();
    assert!(params.windows(2).all(|w| w[1] <= w[0]));

    // Missing directory is a clean diagnostic.
    assert!(cmd_report(&dir.path().join("nope")).is_err());
}

#[test]
fn image_folder_datasets_load() {
    // Two classes of 4x4 PNGs in class subdirectories.
    let dir = tempfile::tempdir().unwrap();
    for (class, shade) in [("class_a", 40u8), ("class_b", 220u8)] {
        let class_dir = dir.path().join(class);
        std::fs::create_dir_all(&class_dir).unwrap();
        for i in 0..4 {
            let img = image::RgbImage::from_pixel(4, 4, image::Rgb([shade, shade / 2, shade]));
            img.save(class_dir.join(format!("{i}.png"))).unwrap();
        }
    }
    let spec = fxdarts::data::DatasetSpec {
        kind: DatasetKind::ImageFolder(dir.path().to_path_buf()),
        resolution: 4,
        classes: 2,
        channels: 3,
        samples: 8,
        train_fraction: 0.75,
    };
    let ds = Dataset::generate(&spec, 5).unwrap();
    assert_eq!(ds.n, 8);
    assert_eq!(ds.classes, 2);
    assert_eq!(ds.train_idx.len(), 6);
}
