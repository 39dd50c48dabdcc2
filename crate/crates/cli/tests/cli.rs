use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bevssl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevssl")).args(args).output().expect("spawn bevssl")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.split_whitespace().find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('='))).unwrap_or_else(|| panic!("{key} missing in {text}"))
}

#[test]
fn no_arguments_is_a_usage_error() {
    let o = bevssl(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(bevssl(&["pairs", "--bogus"]).status.code(), Some(2));
    assert_eq!(bevssl(&["gradcheck", "--align", "sideways"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_usage_error() {
    let o = bevssl(&["pairs", "--poses", "/nonexistent/poses.txt", "--dt", "0.7"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/poses.txt"));
}

#[test]
fn pairs_on_the_ten_hz_fixture() {
    let poses = fixture("poses_10hz.txt");
    let times = fixture("times_10hz.txt");
    let o = bevssl(&["pairs", "--poses", poses.to_str().unwrap(), "--times", times.to_str().unwrap(), "--dt", "0.7"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<(usize, usize)> = stdout(&o)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].parse().unwrap(), c[1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows, vec![(0, 7), (1, 8), (2, 9), (3, 10)]);
}

#[test]
fn gradcheck_passes_for_seed_zero() {
    let o = bevssl(&["gradcheck", "--seed", "0", "--align", "bilinear2d"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let err: f64 = value(&stdout(&o), "max_rel_error").parse().unwrap();
    assert!(err < 1e-5);
}

#[test]
fn synth_pretrain_pool_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let data_s = data.to_str().unwrap();
    let run_s = run.to_str().unwrap();

    let o = bevssl(&["synth", "--seed", "1", "--out", data_s, "--poses", "6", "--points", "300"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("velodyne/000005.bin").is_file());

    let o = bevssl(&["pretrain", "--data", data_s, "--out", run_s, "--epochs", "1", "--dt", "0.3", "--grid", "64", "--cell-size", "0.5", "--n-samples", "32"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(value(&text, "pairs"), "3");
    assert_eq!(value(&text, "steps"), "2");
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.is_file() && run.join("metrics.csv").is_file());

    let grid = dir.path().join("grid.csv");
    let scan = data.join("velodyne/000000.bin");
    let o = bevssl(&["pool", "--scan", scan.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap(), "--grid", "64", "--cell-size", "0.5", "--out", grid.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&grid).unwrap();
    let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(body.len() > 2);
    // Header row, then one row per occupied cell: row, col, count, 16 features.
    assert_eq!(body[1].split(',').count(), 3 + 16);

    let o = bevssl(&["probe", "--ckpt", ckpt.to_str().unwrap(), "--scene-seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for key in ["pretrained_accuracy", "random_init_accuracy"] {
        let acc: f64 = value(&text, key).parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn resume_requires_an_existing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    bevssl(&["synth", "--out", data.to_str().unwrap(), "--poses", "5", "--points", "100"]);
    let o = bevssl(&["pretrain", "--data", data.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap(), "--resume", "/nonexistent.ckpt"]);
    assert_ne!(o.status.code(), Some(0));
}
