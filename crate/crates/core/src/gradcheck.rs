//! Finite-difference check of the full pipeline's parameter gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrast::{AlignMode, LossConfig};
use crate::autodiff::Tensor;
use crate::encoder::{input_matrix, EncodeOptions, EncoderParams, DEFAULT_DIM, DEFAULT_HIDDEN};
use crate::geometry::RigidTransform;
use crate::trainer::{evaluate_pair, PairSetup, TrainError, TrainingPair};
use crate::{Point, PointCloud};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Components smaller than this fraction of the largest gradient component
/// are compared against that floor instead of their own magnitude.
pub const RELATIVE_FLOOR: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
/// Hidden pre-activations must stay this many perturbation steps away from
/// the ReLU kink.
const KINK_STEPS: f64 = 10.0;
const MAX_REDRAWS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub mode: AlignMode,
    pub n_params: usize,
    pub max_rel_error: f64,
    /// Flat parameter index where the maximum occurred.
    pub worst_index: usize,
    pub loss: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Smallest `|z|` over all hidden pre-activations of both scans.
fn min_hidden_preactivation(params: &EncoderParams, pair: &TrainingPair, options: EncodeOptions) -> f64 {
    let mut min = f64::INFINITY;
    for cloud in [&pair.reference, &pair.other] {
        let mut h = input_matrix(cloud, options);
        for layer in &params.layers()[..params.layers().len() - 1] {
            let (fan_in, fan_out) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let w = layer.weight.data();
            let mut next = Vec::with_capacity(h.rows() * fan_out);
            for r in 0..h.rows() {
                let x = h.row(r);
                for o in 0..fan_out {
                    let z = layer.bias.data()[o] + (0..fan_in).map(|i| x[i] * w[i * fan_out + o]).sum::<f64>();
                    min = min.min(z.abs());
                    next.push(z.max(0.0));
                }
            }
            h = Tensor::new(vec![h.rows(), fan_out], next).expect("sized");
        }
    }
    min
}

/// Default-shaped encoder parameters for the check pair, redrawn until no
/// hidden unit sits within reach of its kink under a `h` perturbation.
pub fn check_params(seed: u64, pair: &TrainingPair, options: EncodeOptions, h: f64) -> Result<EncoderParams, TrainError> {
    let scale = pair
        .reference
        .points
        .iter()
        .chain(&pair.other.points)
        .flat_map(|p| [p.x.abs(), p.y.abs(), p.z.abs(), p.intensity.abs()])
        .fold(1.0, f64::max);
    let margin = KINK_STEPS * h * scale;
    for draw in 0..MAX_REDRAWS {
        let params = EncoderParams::init(seed.wrapping_add(draw.wrapping_mul(0x9E37_79B9)), DEFAULT_HIDDEN, DEFAULT_DIM)?;
        if min_hidden_preactivation(&params, pair, options) > margin {
            return Ok(params);
        }
    }
    Err(TrainError::InvalidConfig(format!("no kink-free parameters after {MAX_REDRAWS} draws")))
}

/// A small seeded pair: 30 points per scan, the second scan observing the
/// same points from a pose shifted by a fraction of a cell and slightly
/// rotated. Points are kept away from cell boundaries in both frames so
/// nearest-cell assignment is locally constant.
pub fn check_pair(seed: u64) -> (TrainingPair, PairSetup) {
    let cell_size = 1.0;
    let m = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw = rng.random_range(-0.05..=0.05);
    let rel = RigidTransform::rotation_z(yaw).with_translation([rng.random_range(0.2..=0.4), rng.random_range(-0.3..=0.3), 0.0]);
    let inv = rel.inverse();
    let interior = |v: f64| {
        let f = v - v.floor();
        (0.15..=0.85).contains(&f)
    };
    let (mut a, mut b) = (Vec::new(), Vec::new());
    while a.len() < 30 {
        let p = [rng.random_range(-2.9..=2.9), rng.random_range(-2.9..=2.9), rng.random_range(-1.5..=1.5)];
        let q = inv.apply(p);
        if ![p[0], p[1], q[0], q[1]].into_iter().all(interior) {
            continue;
        }
        let i = rng.random_range(0.0..=1.0);
        a.push(Point::new(p[0], p[1], p[2], i));
        b.push(Point::new(q[0], q[1], q[2], i));
    }
    let pair = TrainingPair { reference: PointCloud::new(a), other: PointCloud::new(b), rel };
    let setup = PairSetup {
        cell_size,
        grid_size: m,
        align_mode: AlignMode::Bilinear2D,
        loss: LossConfig { tau: 0.5, n_samples: 64, seed, occupancy_eps: 1e-6 },
        encode: EncodeOptions::default(),
    };
    (pair, setup)
}

/// Compares the analytic gradient with central differences for every
/// encoder parameter.
pub fn gradient_check(seed: u64, mode: AlignMode, h: f64) -> Result<GradCheckReport, TrainError> {
    let (pair, mut setup) = check_pair(seed);
    setup.align_mode = mode;
    let params = check_params(seed, &pair, setup.encode, h)?;
    let eval = |p: &EncoderParams, grads: bool| {
        evaluate_pair(p, &pair, &setup, grads)?.ok_or(TrainError::AllPairsDegenerate)
    };
    let base = eval(&params, true)?;
    let analytic: Vec<f64> = base.grads.expect("requested").concat();
    let flat = params.to_flat();
    let mut numeric = Vec::with_capacity(flat.len());
    for k in 0..flat.len() {
        let mut plus = flat.clone();
        plus[k] += h;
        let mut minus = flat.clone();
        minus[k] -= h;
        let lp = eval(&EncoderParams::from_flat(params.hidden(), params.dim(), &plus)?, false)?.loss;
        let lm = eval(&EncoderParams::from_flat(params.hidden(), params.dim(), &minus)?, false)?.loss;
        numeric.push((lp - lm) / (2.0 * h));
    }
    let floor = RELATIVE_FLOOR * analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst = (0.0, 0);
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(*a, *n, floor);
        if err > worst.0 {
            worst = (err, k);
        }
    }
    Ok(GradCheckReport { mode, n_params: flat.len(), max_rel_error: worst.0, worst_index: worst.1, loss: base.loss })
}
