use std::fs;
use std::path::Path;

use bevssl::contrast::AlignMode;
use bevssl::encoder;
use bevssl::io_kitti::PairingMode;
use bevssl::synthbench::{self, BenchSpec, RenderOptions};
use bevssl::trainer::{self, TrainConfig, TrainError};

fn small_config() -> TrainConfig {
    TrainConfig {
        lr_max: 1e-2,
        epochs: 3,
        batch_size: 2,
        pairing: PairingMode::ByTime { seconds: 0.3 },
        cell_size: 0.5,
        grid_size: 64,
        n_samples: 32,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn export_small(dir: &Path) {
    let spec = BenchSpec { traj_len: 8, render: RenderOptions { n_points: 300, ..RenderOptions::default() }, ..BenchSpec::default() };
    let (scene, scans) = synthbench::synth_dataset(2, &spec).unwrap();
    synthbench::export_sequence(dir, &scene, &scans).unwrap();
}

fn data_rows(metrics: &str) -> Vec<&str> {
    metrics.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn run_writes_every_artifact() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    export_small(data.path());
    let cfg = small_config();
    let summary = trainer::run_pretrain_dir(&cfg, data.path(), out.path(), None).unwrap();
    // 8 poses at 10 Hz with a 0.3 s gap give pairs (0,3)..(4,7).
    assert_eq!(summary.n_pairs, 5);
    let per_epoch = trainer::steps_per_epoch(5, 2);
    assert_eq!(per_epoch, 3);
    assert_eq!(summary.records.len(), 9);

    for name in ["config.json", "metrics.csv", "final.ckpt", "epoch_000.ckpt", "epoch_001.ckpt", "epoch_002.ckpt"] {
        assert!(out.path().join(name).is_file(), "{name} missing");
    }
    let metrics = fs::read_to_string(&summary.metrics).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("# lr_max=")));
    let rows = data_rows(&metrics);
    assert_eq!(rows.len(), 9);
    for (k, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols[0].parse::<usize>().unwrap(), k);
        assert_eq!(cols[1].parse::<usize>().unwrap(), k / per_epoch);
        assert!(cols[3].parse::<f64>().unwrap().is_finite());
    }

    let reloaded = trainer::load_config(&out.path().join("config.json")).unwrap();
    assert_eq!(reloaded, cfg);
    let (params, opt) = encoder::load_checkpoint(&summary.final_checkpoint).unwrap();
    assert_eq!(params.num_params(), 4 * 32 + 32 + 32 * 32 + 32 + 32 * 16 + 16);
    assert_eq!(opt.unwrap().step, 9);
}

#[test]
fn resuming_from_an_epoch_checkpoint_matches_an_uninterrupted_run() {
    let data = tempfile::tempdir().unwrap();
    let full = tempfile::tempdir().unwrap();
    let resumed = tempfile::tempdir().unwrap();
    export_small(data.path());
    let cfg = small_config();
    trainer::run_pretrain_dir(&cfg, data.path(), full.path(), None).unwrap();
    let summary = trainer::run_pretrain_dir(&cfg, data.path(), resumed.path(), Some(&full.path().join("epoch_000.ckpt"))).unwrap();
    assert_eq!(summary.records.first().unwrap().step, 3);
    assert_eq!(fs::read(full.path().join("final.ckpt")).unwrap(), fs::read(resumed.path().join("final.ckpt")).unwrap());

    let whole = fs::read_to_string(full.path().join("metrics.csv")).unwrap();
    let tail = fs::read_to_string(resumed.path().join("metrics.csv")).unwrap();
    assert_eq!(data_rows(&whole)[3..], data_rows(&tail)[..]);
}

#[test]
fn exact3d_runs_through_the_directory_driver() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    export_small(data.path());
    let cfg = TrainConfig { align_mode: AlignMode::Exact3D, epochs: 1, ..small_config() };
    let summary = trainer::run_pretrain_dir(&cfg, data.path(), out.path(), None).unwrap();
    assert!(summary.records.iter().all(|r| r.loss.is_finite() && r.n_cells > 0));
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"lr_max": 0.01, "not_a_knob": 1}"#).unwrap();
    assert!(matches!(trainer::load_config(&path), Err(TrainError::Json(_))));
    fs::write(&path, r#"{"tau": -1.0}"#).unwrap();
    assert!(trainer::load_config(&path).is_err());
    fs::write(&path, r#"{"epochs": 7}"#).unwrap();
    let cfg = trainer::load_config(&path).unwrap();
    assert_eq!(cfg, TrainConfig { epochs: 7, ..TrainConfig::default() });
    assert!(trainer::load_config(&dir.path().join("missing.json")).is_err());
}

#[test]
fn empty_dataset_has_no_pairs() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    export_small(data.path());
    let cfg = TrainConfig { pairing: PairingMode::ByTime { seconds: 60.0 }, ..small_config() };
    assert!(matches!(trainer::run_pretrain_dir(&cfg, data.path(), out.path(), None), Err(TrainError::NoPairs)));
}
