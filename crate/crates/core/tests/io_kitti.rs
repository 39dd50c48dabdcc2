use std::path::{Path, PathBuf};

use bevssl::geometry::RigidTransform;
use bevssl::io_kitti::{self, PairingMode, PoseTrack, Timing};
use bevssl::Point;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn two_point_fixture_decodes_in_file_order() {
    let cloud = io_kitti::load_scan(&fixture("two_points.bin")).unwrap();
    assert_eq!(cloud.points, vec![Point::new(1.5, -2.0, 0.25, 0.75), Point::new(-8.0, 16.0, 0.0, 1.0)]);
    let bytes = std::fs::read(fixture("two_points.bin")).unwrap();
    assert_eq!(io_kitti::encode_scan(&cloud), bytes);
}

#[test]
fn ten_hz_fixture_pairs_at_default_gap() {
    let track = io_kitti::load_poses(&fixture("poses_10hz.txt"), None, &Timing::File(fixture("times_10hz.txt"))).unwrap();
    let pairs = io_kitti::select_pairs(&track, PairingMode::ByTime { seconds: 0.7 }).unwrap();
    let idx: Vec<(usize, usize)> = pairs.iter().map(|p| (p.index_a, p.index_b)).collect();
    assert_eq!(idx, vec![(0, 7), (1, 8), (2, 9), (3, 10)]);

    let synthesized = io_kitti::load_poses(&fixture("poses_10hz.txt"), None, &Timing::Rate(10.0)).unwrap();
    let again = io_kitti::select_pairs(&synthesized, PairingMode::ByTime { seconds: 0.7 }).unwrap();
    assert_eq!(again.iter().map(|p| (p.index_a, p.index_b)).collect::<Vec<_>>(), idx);
}

#[test]
fn calibration_conjugates_camera_poses() {
    let track = io_kitti::load_poses(&fixture("pose_translate_x.txt"), Some(&fixture("calib_rot90.txt")), &Timing::Rate(10.0)).unwrap();
    let t = track.poses[0].translation;
    // Expected value from an independent 4x4 multiply of Tr^-1 * T * Tr.
    for (got, want) in t.iter().zip([0.0, -1.0, 0.0]) {
        assert!((got - want).abs() < 1e-12, "{t:?}");
    }
}

#[test]
fn straight_line_distance_pairs() {
    let poses: Vec<RigidTransform<f64>> = (0..12).map(|i| RigidTransform::from_translation([i as f64, 0.0, 0.0])).collect();
    let track = PoseTrack::new(poses.clone(), (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
    let pairs = io_kitti::select_pairs(&track, PairingMode::ByDist { meters: 5.0 }).unwrap();
    // Brute-force oracle: first later scan at least 5 m away.
    let oracle: Vec<(usize, usize)> = (0..12)
        .filter_map(|a| {
            (a + 1..12)
                .find(|&b| {
                    let d: f64 = (0..3).map(|k| (poses[b].translation[k] - poses[a].translation[k]).powi(2)).sum::<f64>().sqrt();
                    d >= 5.0
                })
                .map(|b| (a, b))
        })
        .collect();
    assert_eq!(pairs.iter().map(|p| (p.index_a, p.index_b)).collect::<Vec<_>>(), oracle);
    assert!(pairs.iter().all(|p| p.index_b == p.index_a + 5));
}

#[test]
fn missing_files_are_io_errors() {
    let err = io_kitti::load_scan(Path::new("/nonexistent/scan.bin")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/scan.bin"));
}

fn arb_track() -> impl Strategy<Value = PoseTrack> {
    prop::collection::vec((0.01f64..0.5, -3.0f64..3.0, -3.0f64..3.0, -std::f64::consts::PI..std::f64::consts::PI), 1..25).prop_map(|steps| {
        let mut t = 0.0;
        let mut times = Vec::new();
        let mut poses = Vec::new();
        for (dt, x, y, yaw) in steps {
            t += dt;
            times.push(t);
            poses.push(RigidTransform::rotation_z(yaw).with_translation([x, y, 0.0]));
        }
        PoseTrack::new(poses, times).unwrap()
    })
}

proptest! {
    #[test]
    fn pairs_satisfy_their_predicate_minimally(track in arb_track(), gap in 0.05f64..2.0, by_time in any::<bool>()) {
        let mode = if by_time { PairingMode::ByTime { seconds: gap } } else { PairingMode::ByDist { meters: gap } };
        let pairs = io_kitti::select_pairs(&track, mode).unwrap();
        prop_assert!(pairs.windows(2).all(|w| w[0].index_a < w[1].index_a));
        for p in &pairs {
            prop_assert!(p.index_a < p.index_b);
            prop_assert!(io_kitti::qualifies(&track, mode, p.index_a, p.index_b));
            prop_assert!(p.index_b == p.index_a + 1 || !io_kitti::qualifies(&track, mode, p.index_a, p.index_b - 1));
            prop_assert!(p.rel.orthonormality_error() < 1e-6);
        }
        // Every scan that has a qualifying partner gets a pair.
        for a in 0..track.len() {
            let has = (a + 1..track.len()).any(|b| io_kitti::qualifies(&track, mode, a, b));
            prop_assert_eq!(has, pairs.iter().any(|p| p.index_a == a));
        }
    }

    #[test]
    fn pose_text_round_trips(track in arb_track()) {
        let text: String = track.poses.iter().map(|p| io_kitti::format_pose_line(p) + "\n").collect();
        let parsed = io_kitti::parse_poses(&text, Path::new("mem")).unwrap();
        for (a, b) in parsed.iter().zip(&track.poses) {
            prop_assert_eq!(a, b);
        }
    }
}
