//! KITTI odometry layouts: velodyne scan binaries, pose files, calibration,
//! timestamps, and scan-pair selection.
//!
//! A dataset directory holds one sequence:
//!
//! ```text
//! DIR/velodyne/000000.bin ...   packed f32 (x, y, z, intensity) records
//! DIR/poses.txt                 one row-major 3x4 matrix per line
//! DIR/times.txt                 optional, one time in seconds per line
//! DIR/calib.txt                 optional, `Tr:` camera-from-lidar
//! ```
//!
//! or several of them under `DIR/sequences/<name>/`. Pairs never cross
//! sequence boundaries.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{relative_transform, GeometryError, RigidTransform};
use crate::{Point, PointCloud};

/// Bytes per packed point record.
pub const RECORD_BYTES: usize = 16;
/// Slack on the time-gap comparison, absorbing decimal round-off in time files.
pub const TIME_GAP_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("scan is {len} bytes, not a multiple of 16; trailing record starts at byte {offset}")]
    Truncated { len: usize, offset: usize },
    #[error("non-finite value in point {index}")]
    NonFinitePoint { index: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("pose {index}: {source}")]
    BadPose { index: usize, source: GeometryError },
    #[error("{0}")]
    Data(String),
    #[error("invalid pairing parameter: {0}")]
    InvalidParameter(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> KittiError + '_ {
    move |source| KittiError::Io { path: path.to_path_buf(), source }
}

/// Decodes packed little-endian f32 records into a cloud.
pub fn decode_scan(bytes: &[u8]) -> Result<PointCloud, KittiError> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        let offset = bytes.len() / RECORD_BYTES * RECORD_BYTES;
        return Err(KittiError::Truncated { len: bytes.len(), offset });
    }
    let points = bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(index, rec)| {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
            let p = Point::new(f(0), f(1), f(2), f(3));
            if p.is_finite() {
                Ok(p)
            } else {
                Err(KittiError::NonFinitePoint { index })
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(PointCloud::new(points))
}

/// Encodes a cloud as packed little-endian f32 records (values are rounded
/// to single precision).
pub fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn load_scan(path: &Path) -> Result<PointCloud, KittiError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_scan(&bytes)
}

pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<(), KittiError> {
    fs::write(path, encode_scan(cloud)).map_err(io_err(path))
}

/// Sensor poses and acquisition times of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrack {
    pub poses: Vec<RigidTransform<f64>>,
    pub timestamps: Vec<f64>,
}

impl PoseTrack {
    pub fn new(poses: Vec<RigidTransform<f64>>, timestamps: Vec<f64>) -> Result<Self, KittiError> {
        if poses.len() != timestamps.len() {
            return Err(KittiError::Data(format!("{} poses but {} timestamps", poses.len(), timestamps.len())));
        }
        if let Some(i) = timestamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(KittiError::Data(format!("timestamps not strictly increasing at index {}", i + 1)));
        }
        for (index, p) in poses.iter().enumerate() {
            p.validate().map_err(|source| KittiError::BadPose { index, source })?;
        }
        Ok(Self { poses, timestamps })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Where timestamps come from when loading a pose file.
#[derive(Debug, Clone, PartialEq)]
pub enum Timing {
    /// One value per line, matching the pose file.
    File(PathBuf),
    /// `t_i = i / rate_hz`.
    Rate(f64),
}

fn parse_numbers(text: &str, path: &Path, line: usize, expected: usize) -> Result<Vec<f64>, KittiError> {
    let vals = text
        .split_whitespace()
        .map(|tok| tok.parse::<f64>().map_err(|e| KittiError::Parse { path: path.to_path_buf(), line, msg: format!("{tok:?}: {e}") }))
        .collect::<Result<Vec<_>, _>>()?;
    if vals.len() != expected {
        return Err(KittiError::Parse { path: path.to_path_buf(), line, msg: format!("expected {expected} values, found {}", vals.len()) });
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(KittiError::Parse { path: path.to_path_buf(), line, msg: "non-finite value".into() });
    }
    Ok(vals)
}

fn as_3x4(v: &[f64]) -> [f64; 12] {
    v.try_into().expect("12 values")
}

/// Parses pose lines (row-major 3x4), skipping blank lines.
pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<RigidTransform<f64>>, KittiError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_numbers(l, path, i + 1, 12).map(|v| RigidTransform::from_rows_3x4(&as_3x4(&v))))
        .collect()
}

/// Reads the `Tr:` (camera-from-lidar) entry of a KITTI calibration file.
pub fn parse_calib_tr(text: &str, path: &Path) -> Result<RigidTransform<f64>, KittiError> {
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.trim_start().strip_prefix("Tr:") {
            let v = parse_numbers(rest, path, i + 1, 12)?;
            let tr = RigidTransform::from_rows_3x4(&as_3x4(&v));
            tr.validate().map_err(|e| KittiError::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
            return Ok(tr);
        }
    }
    Err(KittiError::Data(format!("{}: no Tr: line", path.display())))
}

pub fn parse_times(text: &str, path: &Path) -> Result<Vec<f64>, KittiError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_numbers(l, path, i + 1, 1).map(|v| v[0]))
        .collect()
}

/// Converts a camera-frame pose to the lidar frame: `Tr^-1 * T_cam * Tr`.
pub fn camera_to_lidar(pose_cam: &RigidTransform<f64>, tr: &RigidTransform<f64>) -> RigidTransform<f64> {
    tr.inverse().compose(pose_cam).compose(tr)
}

/// Loads a pose file, converting to the lidar frame when `calib_path` is
/// given. Without calibration the poses are taken to be in the lidar frame.
pub fn load_poses(pose_path: &Path, calib_path: Option<&Path>, timing: &Timing) -> Result<PoseTrack, KittiError> {
    let text = fs::read_to_string(pose_path).map_err(io_err(pose_path))?;
    let mut poses = parse_poses(&text, pose_path)?;
    match calib_path {
        Some(cp) => {
            let tr = parse_calib_tr(&fs::read_to_string(cp).map_err(io_err(cp))?, cp)?;
            poses = poses.iter().map(|p| camera_to_lidar(p, &tr)).collect();
        }
        None => log::info!("{}: no calibration given, poses taken as lidar frame", pose_path.display()),
    }
    let timestamps = match timing {
        Timing::File(tp) => parse_times(&fs::read_to_string(tp).map_err(io_err(tp))?, tp)?,
        Timing::Rate(rate) => {
            if !(*rate > 0.0 && rate.is_finite()) {
                return Err(KittiError::InvalidParameter(format!("scan rate must be positive, got {rate}")));
            }
            (0..poses.len()).map(|i| i as f64 / rate).collect()
        }
    };
    PoseTrack::new(poses, timestamps)
}

/// Formats one pose line with shortest round-trip decimals.
pub fn format_pose_line(pose: &RigidTransform<f64>) -> String {
    pose.to_rows_3x4().iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

pub fn write_poses(path: &Path, poses: &[RigidTransform<f64>]) -> Result<(), KittiError> {
    let text: String = poses.iter().map(|p| format_pose_line(p) + "\n").collect();
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_times(path: &Path, times: &[f64]) -> Result<(), KittiError> {
    let text: String = times.iter().map(|t| format!("{t:e}\n")).collect();
    fs::write(path, text).map_err(io_err(path))
}

/// Pair selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PairingMode {
    /// Partner is the first later scan at least `seconds` after.
    ByTime { seconds: f64 },
    /// Partner is the first later scan whose sensor moved at least `meters`.
    ByDist { meters: f64 },
}

impl Default for PairingMode {
    fn default() -> Self {
        PairingMode::ByTime { seconds: 0.7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPair {
    /// Reference scan (earlier).
    pub index_a: usize,
    /// Scan registered onto the reference (later).
    pub index_b: usize,
    /// Maps points of scan `b` into the frame of scan `a`.
    pub rel: RigidTransform<f64>,
    /// Time (s) or distance (m) between the two scans, per the pairing mode.
    pub gap: f64,
}

fn distance(a: &RigidTransform<f64>, b: &RigidTransform<f64>) -> f64 {
    let d: f64 = (0..3).map(|k| (b.translation[k] - a.translation[k]).powi(2)).sum();
    d.sqrt()
}

fn gap(track: &PoseTrack, mode: PairingMode, a: usize, b: usize) -> f64 {
    match mode {
        PairingMode::ByTime { .. } => track.timestamps[b] - track.timestamps[a],
        PairingMode::ByDist { .. } => distance(&track.poses[a], &track.poses[b]),
    }
}

/// True when scans `a < b` satisfy the gap predicate of `mode`.
pub fn qualifies(track: &PoseTrack, mode: PairingMode, a: usize, b: usize) -> bool {
    match mode {
        PairingMode::ByTime { seconds } => gap(track, mode, a, b) >= seconds - TIME_GAP_SLACK,
        PairingMode::ByDist { meters } => gap(track, mode, a, b) >= meters,
    }
}

/// One pair per scan that has a qualifying later partner, sorted by `index_a`.
pub fn select_pairs(track: &PoseTrack, mode: PairingMode) -> Result<Vec<ScanPair>, KittiError> {
    let threshold = match mode {
        PairingMode::ByTime { seconds } => seconds,
        PairingMode::ByDist { meters } => meters,
    };
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(KittiError::InvalidParameter(format!("pair gap must be positive, got {threshold}")));
    }
    if track.is_empty() {
        return Err(KittiError::Data("empty pose track".into()));
    }
    let n = track.len();
    let pairs = (0..n)
        .filter_map(|a| {
            (a + 1..n).find(|&b| qualifies(track, mode, a, b)).map(|b| ScanPair {
                index_a: a,
                index_b: b,
                rel: relative_transform(&track.poses[a], &track.poses[b]),
                gap: gap(track, mode, a, b),
            })
        })
        .collect();
    Ok(pairs)
}

/// A loaded sequence: scans plus their poses.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub scans: Vec<PointCloud>,
    pub track: PoseTrack,
}

/// Options for reading dataset directories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetOptions {
    /// Used when a sequence has no `times.txt`.
    pub scan_rate_hz: f64,
}

fn scan_files(dir: &Path) -> Result<Vec<PathBuf>, KittiError> {
    let vdir = dir.join("velodyne");
    let mut files: Vec<PathBuf> = fs::read_dir(&vdir)
        .map_err(io_err(&vdir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a single sequence directory.
pub fn load_sequence(dir: &Path, options: DatasetOptions) -> Result<Sequence, KittiError> {
    let times = dir.join("times.txt");
    let calib = dir.join("calib.txt");
    let timing = if times.exists() { Timing::File(times) } else { Timing::Rate(options.scan_rate_hz) };
    let calib = calib.exists().then_some(calib);
    let track = load_poses(&dir.join("poses.txt"), calib.as_deref(), &timing)?;
    let files = scan_files(dir)?;
    if files.len() != track.len() {
        return Err(KittiError::Data(format!("{}: {} scans but {} poses", dir.display(), files.len(), track.len())));
    }
    let scans = files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut c = load_scan(f)?;
            c.scan_id = i;
            c.timestamp = track.timestamps[i];
            Ok(c)
        })
        .collect::<Result<_, KittiError>>()?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Sequence { name, scans, track })
}

/// Loads `DIR` as one sequence, or every `DIR/sequences/*` in name order.
pub fn load_dataset(dir: &Path, options: DatasetOptions) -> Result<Vec<Sequence>, KittiError> {
    let seq_root = dir.join("sequences");
    if !seq_root.is_dir() {
        return Ok(vec![load_sequence(dir, options)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&seq_root)
        .map_err(io_err(&seq_root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_sequence(d, options)).collect()
}

/// Writes one sequence directory (scans, poses, times).
pub fn write_sequence(dir: &Path, scans: &[PointCloud], poses: &[RigidTransform<f64>], times: &[f64]) -> Result<(), KittiError> {
    let vdir = dir.join("velodyne");
    fs::create_dir_all(&vdir).map_err(io_err(&vdir))?;
    for (i, s) in scans.iter().enumerate() {
        write_scan(&vdir.join(format!("{i:06}.bin")), s)?;
    }
    write_poses(&dir.join("poses.txt"), poses)?;
    write_times(&dir.join("times.txt"), times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(path: &str) -> PathBuf {
        PathBuf::from(path)
    }

    fn track_10hz(n: usize) -> PoseTrack {
        let poses = (0..n).map(|_| RigidTransform::identity()).collect();
        PoseTrack::new(poses, (0..n).map(|i| i as f64 / 10.0).collect()).unwrap()
    }

    #[test]
    fn decode_single_record() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = decode_scan(&bytes).unwrap();
        assert_eq!(c.points, vec![Point::new(1.0, 2.0, 3.0, 0.5)]);
        assert!(decode_scan(&[]).unwrap().is_empty());
    }

    #[test]
    fn decode_two_records_from_independent_bytes() {
        // Bytes written out by hand: (1.5, -2.0, 0.25, 0.75), (-8.0, 16.0, 0.0, 1.0).
        let bytes: [u8; 32] = [
            0x00, 0x00, 0xc0, 0x3f, 0x00, 0x00, 0x00, 0xc0, 0x00, 0x00, 0x80, 0x3e, 0x00, 0x00, 0x40, 0x3f, //
            0x00, 0x00, 0x00, 0xc1, 0x00, 0x00, 0x80, 0x41, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x80, 0x3f,
        ];
        let c = decode_scan(&bytes).unwrap();
        assert_eq!(c.points, vec![Point::new(1.5, -2.0, 0.25, 0.75), Point::new(-8.0, 16.0, 0.0, 1.0)]);
        assert_eq!(encode_scan(&c), bytes);
    }

    #[test]
    fn truncated_and_non_finite_scans_fail() {
        let err = decode_scan(&[0u8; 20]).unwrap_err();
        assert!(matches!(err, KittiError::Truncated { len: 20, offset: 16 }));
        let mut bytes = vec![0u8; 32];
        bytes[16 + 8..16 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_scan(&bytes), Err(KittiError::NonFinitePoint { index: 1 })));
    }

    #[test]
    fn identity_pose_line() {
        let poses = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n", &p("poses.txt")).unwrap();
        assert_eq!(poses, vec![RigidTransform::identity()]);
        let lidar = camera_to_lidar(&poses[0], &RigidTransform::identity());
        assert_eq!(lidar, RigidTransform::identity());
    }

    #[test]
    fn calibration_conjugates_translation() {
        let cam = RigidTransform::from_translation([1.0, 0.0, 0.0]);
        let tr = parse_calib_tr("P0: 1 0 0 0 0 1 0 0 0 0 1 0\nTr: 0 -1 0 0 1 0 0 0 0 0 1 0\n", &p("calib.txt")).unwrap();
        let lidar = camera_to_lidar(&cam, &tr);
        assert!(lidar.max_abs_diff(&RigidTransform::from_translation([0.0, -1.0, 0.0])) < 1e-15);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n\n1 0 0 0 0 1 0 0 0 0 1\n", &p("x")).unwrap_err();
        assert!(matches!(err, KittiError::Parse { line: 3, .. }), "{err}");
        let err = parse_poses("1 0 0 0 0 1 0 0 0 0 1 zz\n", &p("x")).unwrap_err();
        assert!(matches!(err, KittiError::Parse { line: 1, .. }));
        assert!(parse_calib_tr("P0: 1 2 3\n", &p("c")).is_err());
    }

    #[test]
    fn non_orthonormal_pose_is_data_error() {
        let poses = parse_poses("2 0 0 0 0 1 0 0 0 0 1 0\n", &p("x")).unwrap();
        assert!(matches!(PoseTrack::new(poses, vec![0.0]), Err(KittiError::BadPose { index: 0, .. })));
        assert!(PoseTrack::new(vec![RigidTransform::identity(); 2], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn pairs_by_time_at_ten_hertz() {
        let pairs = select_pairs(&track_10hz(11), PairingMode::ByTime { seconds: 0.7 }).unwrap();
        let idx: Vec<_> = pairs.iter().map(|p| (p.index_a, p.index_b)).collect();
        assert_eq!(idx, vec![(0, 7), (1, 8), (2, 9), (3, 10)]);
        assert!(select_pairs(&track_10hz(1), PairingMode::ByTime { seconds: 0.7 }).unwrap().is_empty());
    }

    #[test]
    fn pairs_by_distance_on_straight_line() {
        let poses: Vec<_> = (0..12).map(|i| RigidTransform::from_translation([i as f64, 0.0, 0.0])).collect();
        let track = PoseTrack::new(poses, (0..12).map(|i| i as f64).collect()).unwrap();
        let pairs = select_pairs(&track, PairingMode::ByDist { meters: 5.0 }).unwrap();
        // Brute-force oracle: first later index with distance >= 5.
        let oracle: Vec<_> = (0..12)
            .filter_map(|a| (a + 1..12).find(|&b| ((b - a) as f64) >= 5.0).map(|b| (a, b)))
            .collect();
        assert_eq!(pairs.iter().map(|p| (p.index_a, p.index_b)).collect::<Vec<_>>(), oracle);
        assert!(pairs.iter().all(|p| p.index_b == p.index_a + 5));
        assert_eq!(pairs[0].rel.translation, [5.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_gaps_rejected() {
        let t = track_10hz(3);
        assert!(matches!(select_pairs(&t, PairingMode::ByTime { seconds: 0.0 }), Err(KittiError::InvalidParameter(_))));
        assert!(matches!(select_pairs(&t, PairingMode::ByDist { meters: -1.0 }), Err(KittiError::InvalidParameter(_))));
    }

    #[test]
    fn pairing_mode_json() {
        let m: PairingMode = serde_json::from_str(r#"{"mode":"by_dist","meters":2.5}"#).unwrap();
        assert_eq!(m, PairingMode::ByDist { meters: 2.5 });
    }

    #[test]
    fn sequence_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scans = vec![PointCloud::new(vec![Point::new(1.0, 2.0, 3.0, 0.5)]), PointCloud::new(vec![])];
        let poses = vec![RigidTransform::identity(), RigidTransform::rotation_z(0.1).with_translation([1.0, 0.2, 0.0])];
        write_sequence(dir.path(), &scans, &poses, &[0.0, 0.1]).unwrap();
        let seq = load_sequence(dir.path(), DatasetOptions { scan_rate_hz: 10.0 }).unwrap();
        assert_eq!(seq.scans.len(), 2);
        assert_eq!(seq.scans[0].points, scans[0].points);
        assert_eq!(seq.track.poses, poses);
        assert_eq!(seq.scans[1].timestamp, 0.1);
    }

    proptest! {
        #[test]
        fn scan_bytes_round_trip(vals in prop::collection::vec(-1e6f32..1e6, 0..64)) {
            let n = vals.len() / 4 * 4;
            let bytes: Vec<u8> = vals[..n].iter().flat_map(|v| v.to_le_bytes()).collect();
            prop_assert_eq!(encode_scan(&decode_scan(&bytes).unwrap()), bytes);
        }

        #[test]
        fn selected_pairs_are_minimal(gaps in prop::collection::vec(0.01f64..0.5, 1..30), dt in 0.05f64..2.0) {
            let mut t = 0.0;
            let times: Vec<f64> = std::iter::once(0.0).chain(gaps.iter().map(|g| { t += g; t })).collect();
            let track = PoseTrack::new(vec![RigidTransform::identity(); times.len()], times).unwrap();
            let mode = PairingMode::ByTime { seconds: dt };
            let pairs = select_pairs(&track, mode).unwrap();
            prop_assert!(pairs.windows(2).all(|w| w[0].index_a < w[1].index_a));
            for pr in &pairs {
                prop_assert!(pr.index_a < pr.index_b);
                prop_assert!(qualifies(&track, mode, pr.index_a, pr.index_b));
                if pr.index_b > pr.index_a + 1 {
                    prop_assert!(!qualifies(&track, mode, pr.index_a, pr.index_b - 1));
                }
            }
        }
    }
}
