use std::collections::HashSet;

use bevssl::autodiff::Tensor;
use bevssl::geometry::{register_3d, relative_transform};
use bevssl::io_kitti::{self, DatasetOptions, PairingMode};
use bevssl::synthbench::{self, BenchSpec, Class, RenderOptions, SceneObject, SyntheticScene};
use bevssl::PointCloud;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Distance from `p` to the boundary of a solid resting on z = 0, ignoring
/// the bottom face.
fn surface_distance(obj: &SceneObject, p: [f64; 3]) -> f64 {
    match *obj {
        SceneObject::Box { min, max, height, .. } => {
            let d = [min[0] - p[0], p[0] - max[0], min[1] - p[1], p[1] - max[1], p[2] - height];
            let outside: f64 = [d[0].max(d[1]).max(0.0), d[2].max(d[3]).max(0.0), d[4].max(0.0)].iter().map(|v| v * v).sum::<f64>().sqrt();
            if outside > 0.0 {
                outside
            } else {
                -d.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        }
        SceneObject::Cylinder { center, radius, height, .. } => {
            let radial = (p[0] - center[0]).hypot(p[1] - center[1]) - radius;
            let vertical = p[2] - height;
            if radial > 0.0 || vertical > 0.0 {
                (radial.max(0.0).powi(2) + vertical.max(0.0).powi(2)).sqrt()
            } else {
                -radial.max(vertical)
            }
        }
    }
}

fn cells(cloud: &PointCloud, b: f64, m: usize) -> HashSet<(i64, i64)> {
    let h = m as f64 * b / 2.0;
    cloud
        .points
        .iter()
        .map(|p| (((p.y + h) / b).floor() as i64, ((p.x + h) / b).floor() as i64))
        .filter(|&(i, j)| i >= 0 && j >= 0 && (i as usize) < m && (j as usize) < m)
        .collect()
}

fn small_scene(seed: u64) -> (SyntheticScene, Vec<synthbench::LabeledCloud>) {
    let spec = BenchSpec { traj_len: 8, ..BenchSpec::default() };
    synthbench::synth_dataset(seed, &spec).unwrap()
}

#[test]
fn rendered_points_lie_on_their_class_surfaces() {
    let (scene, scans) = small_scene(11);
    for (k, scan) in scans.iter().enumerate().step_by(3) {
        let pose = scene.poses[k];
        for (p, class) in scan.cloud.points.iter().zip(&scan.labels) {
            let w = pose.apply(p.xyz());
            // Noise is 0.02 m per axis; 0.15 m is beyond seven sigma.
            let d = match class {
                Class::Ground => w[2].abs(),
                c => scene.objects.iter().filter(|o| o.class() == *c).map(|o| surface_distance(o, w)).fold(f64::INFINITY, f64::min),
            };
            assert!(d < 0.15, "scan {k}: {class:?} point {w:?} is {d} m off");
            assert!((0.0..=1.0).contains(&p.intensity));
        }
    }
}

#[test]
fn nearby_scans_overlap() {
    for seed in 0..3 {
        let (scene, scans) = small_scene(seed);
        for a in 0..scene.poses.len() {
            for b in a + 1..(a + 3).min(scene.poses.len()) {
                let rel = relative_transform(&scene.poses[a], &scene.poses[b]);
                let ref_cells = cells(&scans[a].cloud, 0.5, 64);
                let other = cells(&register_3d(&scans[b].cloud, &rel), 0.5, 64);
                let frac = ref_cells.intersection(&other).count() as f64 / ref_cells.len() as f64;
                assert!(frac > 0.2, "seed {seed} poses {a},{b}: overlap {frac}");
            }
        }
    }
}

#[test]
fn default_bench_yields_twenty_pairs() {
    let spec = BenchSpec::default();
    let scene = synthbench::generate_scene(0, spec.n_objects, spec.traj_len).unwrap();
    let scans: Vec<_> = (0..spec.traj_len).map(|k| synthbench::render_scan(&scene, k, &RenderOptions { n_points: 50, ..spec.render }, k as u64).unwrap()).collect();
    let pairs = synthbench::training_pairs(&scene, &scans, PairingMode::ByTime { seconds: 0.7 }).unwrap();
    assert_eq!(pairs.len(), 20);
}

#[test]
fn probe_on_noise_is_near_chance() {
    let n = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let feats: Vec<f64> = (0..n * 16).map(|_| StandardNormal.sample(&mut rng)).collect();
    let acc = synthbench::linear_probe(&Tensor::new(vec![n, 16], feats).unwrap(), &labels, 3).unwrap();
    // 300 held-out points: sigma = sqrt(0.25 * 0.75 / 300) ~ 0.025.
    assert!((acc - 0.25).abs() < 3.0 * 0.025, "accuracy {acc}");
}

#[test]
fn export_round_trips_through_the_loader() {
    let (scene, scans) = small_scene(4);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synthbench::export_sequence(a.path(), &scene, &scans).unwrap();
    synthbench::export_labels(a.path(), &scans).unwrap();

    let seq = io_kitti::load_sequence(a.path(), DatasetOptions { scan_rate_hz: 10.0 }).unwrap();
    assert_eq!(seq.scans.len(), scans.len());
    for (loaded, orig) in seq.scans.iter().zip(&scans) {
        assert_eq!(loaded.len(), orig.cloud.len());
        for (p, q) in loaded.points.iter().zip(&orig.cloud.points) {
            assert_eq!([p.x, p.y, p.z, p.intensity], [q.x as f32 as f64, q.y as f32 as f64, q.z as f32 as f64, q.intensity as f32 as f64]);
        }
    }
    io_kitti::write_sequence(b.path(), &seq.scans, &seq.track.poses, &seq.track.timestamps).unwrap();
    for rel in ["poses.txt", "times.txt", "velodyne/000000.bin", "velodyne/000007.bin"] {
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
    let label_bytes = std::fs::read(a.path().join("labels/000002.label")).unwrap();
    assert_eq!(label_bytes.len(), 4 * scans[2].labels.len());
}
