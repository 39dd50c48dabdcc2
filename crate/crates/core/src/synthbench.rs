//! Synthetic labeled street scenes, a scan renderer, and a linear probe.
//!
//! World frame: ground is the plane z = 0; the ego drives roughly along +x
//! with the sensor mounted [`SENSOR_HEIGHT`] above the ground.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::geometry::{relative_transform, RigidTransform};
use crate::io_kitti::{self, KittiError, PairingMode};
use crate::trainer::TrainingPair;
use crate::{Point, PointCloud};

pub const SENSOR_HEIGHT: f64 = 1.8;
/// Largest heading change between consecutive poses, radians.
pub const MAX_YAW_STEP: f64 = 5.0 * PI / 180.0;
pub const SCAN_RATE_HZ: f64 = 10.0;
/// Peak deviation of surface reflectance from its class prior.
pub const TEXTURE_AMPLITUDE: f64 = 0.15;
const TEXTURE_WAVES: usize = 4;
const TEXTURE_WAVELENGTH: (f64, f64) = (1.0, 3.0);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("probe needs at least two classes, got {0}")]
    SingleClass(usize),
    #[error("features have {rows} rows but there are {labels} labels")]
    LabelMismatch { rows: usize, labels: usize },
    #[error(transparent)]
    Kitti(#[from] KittiError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Ground = 0,
    Building = 1,
    Car = 2,
    Pole = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Ground, Class::Building, Class::Car, Class::Pole];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn intensity_prior(self) -> f64 {
        match self {
            Class::Ground => 0.2,
            Class::Building => 0.5,
            Class::Car => 0.7,
            Class::Pole => 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SceneObject {
    /// Axis-aligned box resting on the ground.
    Box { class: Class, min: [f64; 2], max: [f64; 2], height: f64 },
    /// Vertical cylinder resting on the ground.
    Cylinder { class: Class, center: [f64; 2], radius: f64, height: f64 },
}

impl SceneObject {
    pub fn class(&self) -> Class {
        match self {
            SceneObject::Box { class, .. } | SceneObject::Cylinder { class, .. } => *class,
        }
    }

    fn footprint_contains(&self, x: f64, y: f64) -> bool {
        match self {
            SceneObject::Box { min, max, .. } => x >= min[0] && x <= max[0] && y >= min[1] && y <= max[1],
            SceneObject::Cylinder { center, radius, .. } => (x - center[0]).hypot(y - center[1]) <= *radius,
        }
    }

    /// Distance from `(x, y)` to the nearest footprint point.
    fn planar_distance(&self, x: f64, y: f64) -> f64 {
        match self {
            SceneObject::Box { min, max, .. } => {
                let dx = (min[0] - x).max(x - max[0]).max(0.0);
                let dy = (min[1] - y).max(y - max[1]).max(0.0);
                dx.hypot(dy)
            }
            SceneObject::Cylinder { center, radius, .. } => ((x - center[0]).hypot(y - center[1]) - radius).max(0.0),
        }
    }

    /// `(area, surface)` of every sampled surface: box sides and roof,
    /// cylinder mantle and cap.
    fn surfaces(&self) -> Vec<(f64, Surface)> {
        match *self {
            SceneObject::Box { min, max, height, .. } => {
                let (w, d) = (max[0] - min[0], max[1] - min[1]);
                vec![
                    (w * height, Surface::WallY { y: min[1], x0: min[0], x1: max[0], h: height }),
                    (w * height, Surface::WallY { y: max[1], x0: min[0], x1: max[0], h: height }),
                    (d * height, Surface::WallX { x: min[0], y0: min[1], y1: max[1], h: height }),
                    (d * height, Surface::WallX { x: max[0], y0: min[1], y1: max[1], h: height }),
                    (w * d, Surface::Roof { min, max, z: height }),
                ]
            }
            SceneObject::Cylinder { center, radius, height, .. } => vec![
                (TAU * radius * height, Surface::Mantle { center, radius, h: height }),
                (PI * radius * radius, Surface::Cap { center, radius, z: height }),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Surface {
    WallX { x: f64, y0: f64, y1: f64, h: f64 },
    WallY { y: f64, x0: f64, x1: f64, h: f64 },
    Roof { min: [f64; 2], max: [f64; 2], z: f64 },
    Mantle { center: [f64; 2], radius: f64, h: f64 },
    Cap { center: [f64; 2], radius: f64, z: f64 },
}

impl Surface {
    fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        match *self {
            Surface::WallX { x, y0, y1, h } => [x, rng.random_range(y0..=y1), rng.random_range(0.0..=h)],
            Surface::WallY { y, x0, x1, h } => [rng.random_range(x0..=x1), y, rng.random_range(0.0..=h)],
            Surface::Roof { min, max, z } => [rng.random_range(min[0]..=max[0]), rng.random_range(min[1]..=max[1]), z],
            Surface::Mantle { center, radius, h } => {
                let a = rng.random_range(0.0..TAU);
                [center[0] + radius * a.cos(), center[1] + radius * a.sin(), rng.random_range(0.0..=h)]
            }
            Surface::Cap { center, radius, z } => {
                let a = rng.random_range(0.0..TAU);
                let r = radius * rng.random::<f64>().sqrt();
                [center[0] + r * a.cos(), center[1] + r * a.sin(), z]
            }
        }
    }
}

/// One plane-wave term of the surface reflectance texture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureWave {
    pub k: [f64; 3],
    pub phase: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
    /// Static world-anchored reflectance pattern (markings, paint, windows)
    /// added to every surface's class prior.
    pub texture: Vec<TextureWave>,
    /// Sensor poses in the world frame.
    pub poses: Vec<RigidTransform<f64>>,
    pub timestamps: Vec<f64>,
    pub seed: u64,
}

impl SyntheticScene {
    /// Noise-free intensity of a `class` surface at world point `p`.
    pub fn reflectance(&self, class: Class, p: [f64; 3]) -> f64 {
        class.intensity_prior() + self.texture.iter().map(|w| w.amplitude * (w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase).sin()).sum::<f64>()
    }
}

/// Rendering settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub n_points: usize,
    pub noise_sigma: f64,
    /// Only surfaces within this planar distance of the sensor are sampled.
    pub range: f64,
    /// Fraction of the point budget per class (ground, building, car, pole),
    /// renormalized over the classes in range. Within a class, points are
    /// spread over surfaces by area.
    pub class_shares: [f64; 4],
    /// Standard deviation of the intensity around its class prior.
    pub intensity_sigma: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { n_points: 2000, noise_sigma: 0.02, range: 16.0, class_shares: [0.4, 0.25, 0.2, 0.15], intensity_sigma: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub labels: Vec<Class>,
}

impl LabeledCloud {
    pub fn label_ids(&self) -> Vec<usize> {
        self.labels.iter().map(|c| c.id()).collect()
    }
}

/// Straight-ish street with objects along both sides of the ego path.
/// Deterministic in `seed`.
pub fn generate_scene(seed: u64, n_objects: usize, traj_len: usize) -> Result<SyntheticScene, SynthError> {
    if traj_len < 2 {
        return Err(SynthError::InvalidArgument(format!("traj_len must be >= 2, got {traj_len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut poses = Vec::with_capacity(traj_len);
    let mut timestamps = Vec::with_capacity(traj_len);
    let (mut x, mut y, mut yaw) = (0.0f64, 0.0f64, 0.0f64);
    let mut path = Vec::with_capacity(traj_len);
    for k in 0..traj_len {
        poses.push(RigidTransform::rotation_z(yaw).with_translation([x, y, SENSOR_HEIGHT]));
        timestamps.push(k as f64 / SCAN_RATE_HZ);
        path.push((x, y, yaw));
        let step = rng.random_range(0.9..=1.1);
        // Steer back toward the x axis so long trajectories stay street-like.
        let dyaw = (rng.random_range(-0.6..=0.6) * MAX_YAW_STEP - 0.3 * yaw).clamp(-MAX_YAW_STEP, MAX_YAW_STEP);
        yaw += dyaw;
        x += step * yaw.cos();
        y += step * yaw.sin();
    }

    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let anchor = path[rng.random_range(0..path.len())];
        let along = rng.random_range(-8.0..=8.0);
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let roll = rng.random::<f64>();
        let (class, lateral) = if roll < 0.35 {
            (Class::Building, rng.random_range(9.0..=13.0))
        } else if roll < 0.75 {
            (Class::Car, rng.random_range(3.0..=4.5))
        } else {
            (Class::Pole, rng.random_range(5.5..=7.0))
        };
        let (s, c) = anchor.2.sin_cos();
        let cx = anchor.0 + along * c - side * lateral * s;
        let cy = anchor.1 + along * s + side * lateral * c;
        objects.push(match class {
            Class::Building => {
                let (hw, hd) = (rng.random_range(2.0..=5.0), rng.random_range(1.5..=3.0));
                SceneObject::Box { class, min: [cx - hw, cy - hd], max: [cx + hw, cy + hd], height: rng.random_range(5.0..=12.0) }
            }
            Class::Car => SceneObject::Box { class, min: [cx - 2.1, cy - 0.9], max: [cx + 2.1, cy + 0.9], height: rng.random_range(1.4..=1.7) },
            _ => SceneObject::Cylinder { class, center: [cx, cy], radius: rng.random_range(0.12..=0.25), height: rng.random_range(4.0..=7.0) },
        });
    }
    let texture = (0..TEXTURE_WAVES)
        .map(|_| {
            let k = TAU / rng.random_range(TEXTURE_WAVELENGTH.0..=TEXTURE_WAVELENGTH.1);
            let dir: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            TextureWave { k: dir.map(|v| k * v / n), phase: rng.random_range(0.0..TAU), amplitude: TEXTURE_AMPLITUDE / TEXTURE_WAVES as f64 }
        })
        .collect();
    Ok(SyntheticScene { objects, texture, poses, timestamps, seed })
}

/// Samples surface points near `scene.poses[pose_index]`, expressed in the
/// sensor frame. Deterministic in `(scene, pose_index, seed, options)`.
pub fn render_scan(scene: &SyntheticScene, pose_index: usize, options: &RenderOptions, seed: u64) -> Result<LabeledCloud, SynthError> {
    let pose = scene
        .poses
        .get(pose_index)
        .ok_or_else(|| SynthError::InvalidArgument(format!("pose index {pose_index} out of {}", scene.poses.len())))?;
    if !(options.range > 0.0) || !(options.noise_sigma >= 0.0) || options.class_shares.iter().any(|s| !(*s >= 0.0)) || !(options.intensity_sigma >= 0.0) {
        return Err(SynthError::InvalidArgument(format!("{options:?}")));
    }
    let [sx, sy, _] = pose.translation;
    let range = options.range;

    let mut by_class: [Vec<(f64, Surface)>; 4] = Default::default();
    for obj in scene.objects.iter().filter(|o| o.planar_distance(sx, sy) < range) {
        by_class[obj.class().id()].extend(obj.surfaces());
    }
    let shares: Vec<f64> = Class::ALL
        .iter()
        .map(|c| if *c == Class::Ground || !by_class[c.id()].is_empty() { options.class_shares[c.id()] } else { 0.0 })
        .collect();
    let total_share: f64 = shares.iter().sum();
    if !(total_share > 0.0) {
        return Err(SynthError::InvalidArgument(format!("class shares {:?} select nothing", options.class_shares)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pose_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ scene.seed.rotate_left(17));
    let noise = Normal::new(0.0, options.noise_sigma).expect("sigma checked");
    let world_to_sensor = pose.inverse();
    let mut points = Vec::with_capacity(options.n_points);
    let mut labels = Vec::with_capacity(options.n_points);
    while points.len() < options.n_points {
        let class = Class::ALL[pick_weighted(&mut rng, &shares)];
        let world = if class == Class::Ground {
            let a = rng.random_range(0.0..TAU);
            let r = range * rng.random::<f64>().sqrt();
            let (gx, gy) = (sx + r * a.cos(), sy + r * a.sin());
            if scene.objects.iter().any(|o| o.footprint_contains(gx, gy)) {
                continue;
            }
            [gx, gy, 0.0]
        } else {
            let surfaces = &by_class[class.id()];
            let areas: Vec<f64> = surfaces.iter().map(|s| s.0).collect();
            surfaces[pick_weighted(&mut rng, &areas)].1.sample(&mut rng)
        };
        if (world[0] - sx).hypot(world[1] - sy) > range {
            continue;
        }
        let p = world_to_sensor.apply(world);
        let jitter: [f64; 3] = [noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)];
        let eta: f64 = rng.sample(StandardNormal);
        let intensity = (scene.reflectance(class, world) + options.intensity_sigma * eta).clamp(0.0, 1.0);
        points.push(Point::new(p[0] + jitter[0], p[1] + jitter[1], p[2] + jitter[2], intensity));
        labels.push(class);
    }
    let mut cloud = PointCloud::new(points);
    cloud.scan_id = pose_index;
    cloud.timestamp = scene.timestamps[pose_index];
    Ok(LabeledCloud { cloud, labels })
}

/// Index drawn with probability proportional to `weights`.
fn pick_weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if pick < *w {
            return i;
        }
        pick -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Renders every pose of the scene; scan `k` uses seed `seed + k`.
pub fn render_all(scene: &SyntheticScene, options: &RenderOptions, seed: u64) -> Result<Vec<LabeledCloud>, SynthError> {
    (0..scene.poses.len()).map(|k| render_scan(scene, k, options, seed.wrapping_add(k as u64))).collect()
}

/// Training pairs from rendered scans, selected like a real sequence.
pub fn training_pairs(scene: &SyntheticScene, scans: &[LabeledCloud], mode: PairingMode) -> Result<Vec<TrainingPair>, SynthError> {
    let track = io_kitti::PoseTrack::new(scene.poses.clone(), scene.timestamps.clone())?;
    Ok(io_kitti::select_pairs(&track, mode)?
        .into_iter()
        .map(|p| TrainingPair {
            reference: scans[p.index_a].cloud.clone(),
            other: scans[p.index_b].cloud.clone(),
            rel: relative_transform(&scene.poses[p.index_a], &scene.poses[p.index_b]),
        })
        .collect())
}

/// Writes the scene's scans, poses and timestamps as a KITTI-style sequence.
pub fn export_sequence(dir: &Path, scene: &SyntheticScene, scans: &[LabeledCloud]) -> Result<(), SynthError> {
    let clouds: Vec<PointCloud> = scans.iter().map(|s| s.cloud.clone()).collect();
    io_kitti::write_sequence(dir, &clouds, &scene.poses, &scene.timestamps)?;
    Ok(())
}

/// Scene and rendering settings of the standard synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSpec {
    pub n_objects: usize,
    pub traj_len: usize,
    pub render: RenderOptions,
}

impl Default for BenchSpec {
    fn default() -> Self {
        // 27 poses at 10 Hz give 20 pairs 0.7 s apart.
        Self { n_objects: 40, traj_len: 27, render: RenderOptions::default() }
    }
}

/// Generates and renders the standard dataset for `seed`.
pub fn synth_dataset(seed: u64, spec: &BenchSpec) -> Result<(SyntheticScene, Vec<LabeledCloud>), SynthError> {
    let scene = generate_scene(seed, spec.n_objects, spec.traj_len)?;
    let scans = render_all(&scene, &spec.render, seed)?;
    Ok((scene, scans))
}

/// Points and pose used for probe evaluation scans.
pub const PROBE_POINTS: usize = 3000;
const PROBE_TRAJ_LEN: usize = 5;

/// Held-out probe accuracy of `params`' frozen per-point features on one
/// labeled scan of a fresh scene generated from `scene_seed`.
pub fn probe_scene(params: &crate::encoder::EncoderParams, scene_seed: u64, spec: &BenchSpec, options: crate::encoder::EncodeOptions) -> Result<f64, crate::trainer::TrainError> {
    let scene = generate_scene(scene_seed, spec.n_objects, PROBE_TRAJ_LEN)?;
    let render = RenderOptions { n_points: PROBE_POINTS, ..spec.render };
    let scan = render_scan(&scene, PROBE_TRAJ_LEN / 2, &render, scene_seed)?;
    let features = params.features(&scan.cloud, options)?;
    Ok(linear_probe(&features, &scan.label_ids(), scene_seed)?)
}

/// Writes `labels/NNNNNN.label` next to the scans: one little-endian `u32`
/// class id per point, in point order.
pub fn export_labels(dir: &Path, scans: &[LabeledCloud]) -> Result<(), SynthError> {
    let ldir = dir.join("labels");
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Kitti(KittiError::Io { path, source })
    };
    std::fs::create_dir_all(&ldir).map_err(io(&ldir))?;
    for (i, s) in scans.iter().enumerate() {
        let bytes: Vec<u8> = s.labels.iter().flat_map(|c| (c.id() as u32).to_le_bytes()).collect();
        let path = ldir.join(format!("{i:06}.label"));
        std::fs::write(&path, bytes).map_err(io(&path))?;
    }
    Ok(())
}

/// Probe training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { iterations: 300, learning_rate: 0.5, train_fraction: 0.7 }
    }
}

/// Held-out accuracy of a multinomial logistic regression on z-scored
/// features, trained by full-batch gradient descent on a seeded 70/30 split.
pub fn linear_probe(features: &Tensor, labels: &[usize], split_seed: u64) -> Result<f64, SynthError> {
    linear_probe_with(features, labels, split_seed, &ProbeOptions::default())
}

pub fn linear_probe_with(features: &Tensor, labels: &[usize], split_seed: u64, opts: &ProbeOptions) -> Result<f64, SynthError> {
    let n = labels.len();
    if features.shape().len() != 2 || features.rows() != n {
        return Err(SynthError::LabelMismatch { rows: features.shape().first().copied().unwrap_or(0), labels: n });
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(SynthError::SingleClass(classes.len()));
    }
    let k = classes[classes.len() - 1] + 1;
    let d = features.cols();

    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_train = ((n as f64 * opts.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);

    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in train {
        features.row(i).iter().zip(&mut mean).for_each(|(v, m)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    for &i in train {
        features.row(i).iter().zip(&mean).zip(&mut std).for_each(|((v, m), s)| *s += (v - m) * (v - m));
    }
    std.iter_mut().for_each(|s| *s = (*s / n_train as f64).sqrt());
    let z = |i: usize| -> Vec<f64> {
        features.row(i).iter().zip(&mean).zip(&std).map(|((v, m), s)| if *s > 1e-12 { (v - m) / s } else { 0.0 }).collect()
    };
    let x_train: Vec<Vec<f64>> = train.iter().map(|&i| z(i)).collect();

    // w is [d + 1, k] with the bias in the last row.
    let mut w = vec![0.0; (d + 1) * k];
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k).map(|c| x.iter().enumerate().map(|(j, v)| v * w[j * k + c]).sum::<f64>() + w[d * k + c]).collect()
    };
    let mut grad = vec![0.0; (d + 1) * k];
    for _ in 0..opts.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, &i) in x_train.iter().zip(train) {
            let l = logits(&w, x);
            let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let r = e[c] / s - if labels[i] == c { 1.0 } else { 0.0 };
                for (j, v) in x.iter().enumerate() {
                    grad[j * k + c] += r * v;
                }
                grad[d * k + c] += r;
            }
        }
        let step = opts.learning_rate / n_train as f64;
        w.iter_mut().zip(&grad).for_each(|(w, g)| *w -= step * g);
    }

    let correct = test
        .iter()
        .filter(|&&i| {
            let l = logits(&w, &z(i));
            let pred = (0..k).fold(0, |best, c| if l[c] > l[best] { c } else { best });
            pred == labels[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::relative_transform;

    #[test]
    fn scene_is_deterministic() {
        assert_eq!(generate_scene(7, 12, 10).unwrap(), generate_scene(7, 12, 10).unwrap());
        assert_ne!(generate_scene(7, 12, 10).unwrap(), generate_scene(8, 12, 10).unwrap());
        assert!(generate_scene(7, 12, 1).is_err());
    }

    #[test]
    fn trajectory_steps_are_about_a_meter_with_bounded_yaw() {
        let s = generate_scene(3, 0, 10).unwrap();
        assert!(s.objects.is_empty());
        for w in s.poses.windows(2) {
            let rel = relative_transform(&w[0], &w[1]);
            let gap = rel.translation[0].hypot(rel.translation[1]);
            assert!((0.85..=1.15).contains(&gap), "gap {gap}");
            assert!(rel.translation[2].abs() < 1e-12);
            let yaw = rel.rotation[1][0].atan2(rel.rotation[0][0]);
            assert!(yaw.abs() <= MAX_YAW_STEP + 1e-12);
        }
        assert!(s.timestamps.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn ground_only_noise_free_scan_sits_at_sensor_height() {
        let s = generate_scene(1, 0, 3).unwrap();
        let opts = RenderOptions { noise_sigma: 0.0, n_points: 500, ..RenderOptions::default() };
        let scan = render_scan(&s, 1, &opts, 9).unwrap();
        assert_eq!(scan.cloud.len(), 500);
        assert!(scan.labels.iter().all(|&c| c == Class::Ground));
        assert!(scan.cloud.points.iter().all(|p| (p.z + SENSOR_HEIGHT).abs() < 1e-9));
        assert!(scan.cloud.points.iter().all(|p| p.x.hypot(p.y) <= opts.range + 1e-9));
        assert_eq!(scan, render_scan(&s, 1, &opts, 9).unwrap());
    }

    #[test]
    fn render_rejects_bad_index() {
        let s = generate_scene(1, 0, 3).unwrap();
        assert!(render_scan(&s, 3, &RenderOptions::default(), 0).is_err());
    }

    #[test]
    fn probe_on_one_hot_labels_is_perfect() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let rows: Vec<Vec<f64>> = labels.iter().map(|&l| (0..4).map(|c| if c == l { 1.0 } else { 0.0 }).collect()).collect();
        let acc = linear_probe(&Tensor::from_rows(&rows).unwrap(), &labels, 0).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn probe_on_constant_features_predicts_majority() {
        let labels: Vec<usize> = (0..300).map(|i| if i % 10 < 7 { 0 } else { 1 + i % 2 }).collect();
        let rows = vec![vec![3.0, -1.0]; 300];
        let acc = linear_probe(&Tensor::from_rows(&rows).unwrap(), &labels, 5).unwrap();
        assert!((acc - 0.7).abs() < 0.1, "acc {acc}");
    }

    #[test]
    fn probe_rejects_single_class_and_mismatch() {
        let rows = vec![vec![1.0, 2.0]; 10];
        let t = Tensor::from_rows(&rows).unwrap();
        assert!(matches!(linear_probe(&t, &[2; 10], 0), Err(SynthError::SingleClass(1))));
        assert!(matches!(linear_probe(&t, &[0, 1], 0), Err(SynthError::LabelMismatch { .. })));
    }
}
