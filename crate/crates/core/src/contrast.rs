//! Alignment of the second grid onto the first, cell sampling, and the
//! cell-level InfoNCE loss.
//!
//! Warps are backward: every destination cell center is pulled back through
//! the inverse planar map and the source grid is sampled there. Sampling
//! positions are computed in cell units,
//! `src = A^-1 q + A^-1 offset / b + M/2 - 1/2` with `q = idx + 1/2 - M/2`,
//! which is the metric-center convention of [`crate::bev`] divided through by
//! `b`. Integer-cell translations and quarter turns therefore land exactly on
//! source cell centers.
//!
//! The warped grid is not rescaled for the empty neighbors that entered the
//! interpolation: rows are l2-normalized before the loss, which absorbs it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, TapeError, Var};
use crate::bev::{bev_pool, BevError, BevGrid, CellIndex, GridSpec};
use crate::geometry::{affine2d_invert, register_3d, Affine2D, GeometryError, RigidTransform};
use crate::PointCloud;

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_N_SAMPLES: usize = 4096;
pub const DEFAULT_OCCUPANCY_EPS: f64 = 1e-6;
/// Floor on row norms before normalization.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ContrastError {
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no cell is occupied in both grids")]
    EmptyOverlap,
    #[error("the loss needs at least 2 cells, got {0}")]
    TooFewCells(usize),
    #[error("grids differ: {0:?} vs {1:?}")]
    GridMismatch(GridSpec, GridSpec),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

/// How the second scan is brought into the first scan's grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum AlignMode {
    /// Pool first, then warp the grid with bilinear interpolation.
    #[default]
    #[serde(rename = "bilinear2d")]
    Bilinear2D,
    /// Pool first, then copy the nearest source cell.
    #[serde(rename = "nearest2d")]
    Nearest2D,
    /// Register the points in 3D, then pool directly into the first grid.
    #[serde(rename = "exact3d")]
    Exact3D,
}

impl AlignMode {
    pub const ALL: [AlignMode; 3] = [AlignMode::Bilinear2D, AlignMode::Nearest2D, AlignMode::Exact3D];

    pub fn name(self) -> &'static str {
        match self {
            AlignMode::Bilinear2D => "bilinear2d",
            AlignMode::Nearest2D => "nearest2d",
            AlignMode::Exact3D => "exact3d",
        }
    }
}

impl std::str::FromStr for AlignMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AlignMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown align mode {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub occupancy_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, n_samples: DEFAULT_N_SAMPLES, seed: 0, occupancy_eps: DEFAULT_OCCUPANCY_EPS }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ContrastError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ContrastError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if self.n_samples < 2 {
            return Err(ContrastError::InvalidConfig(format!("n_samples must be >= 2, got {}", self.n_samples)));
        }
        if !(self.occupancy_eps >= 0.0) {
            return Err(ContrastError::InvalidConfig(format!("occupancy_eps must be >= 0, got {}", self.occupancy_eps)));
        }
        Ok(())
    }
}

const SNAP_EPS: f64 = 1e-9;

/// Position in source cell-index coordinates (column, row) that the
/// destination cell `(row, col)` samples.
fn source_position(inv: &Affine2D<f64>, spec: GridSpec, row: usize, col: usize) -> (f64, f64) {
    let half = spec.m() as f64 / 2.0;
    let b = spec.cell_size();
    let qc = col as f64 + 0.5 - half;
    let qr = row as f64 + 0.5 - half;
    let (ox, oy) = (inv.offset[0] / b, inv.offset[1] / b);
    let sc = inv.linear[0][0] * qc + inv.linear[0][1] * qr + ox + half - 0.5;
    let sr = inv.linear[1][0] * qc + inv.linear[1][1] * qr + oy + half - 0.5;
    (snap(sc), snap(sr))
}

/// Rounds positions within `SNAP_EPS` cells of an integer onto it, so metric
/// offsets that are whole cells up to rounding land exactly on cell centers.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_EPS {
        r
    } else {
        v
    }
}

fn source_cell(src: &BevGrid, row: f64, col: f64) -> Option<usize> {
    let m = src.m() as f64;
    if row < 0.0 || col < 0.0 || row >= m || col >= m {
        return None;
    }
    let k = row as usize * src.m() + col as usize;
    (src.counts()[k] > 0).then_some(k)
}

/// Applies per-cell taps to `src` on `tape`; occupancy and counts are blended
/// with the same taps.
fn apply_taps(src: &BevGrid, taps: Vec<Vec<(usize, f64)>>, tape: &mut Tape) -> Result<BevGrid, ContrastError> {
    let occupancy = taps.iter().map(|t| t.iter().map(|&(s, w)| w * src.occupancy()[s].min(1.0)).sum()).collect();
    let counts = taps.iter().map(|t| t.iter().map(|&(s, _)| src.counts()[s]).sum()).collect();
    let input = src.var(tape)?;
    let node = tape.mix_rows(input, taps)?;
    Ok(BevGrid::from_parts(src.spec(), tape.value(node).clone(), Some(node), counts, occupancy, 0))
}

/// Bilinear backward warp of `src` by the planar map `a` (source frame to
/// destination frame). Samples outside the grid and empty cells contribute
/// zero; the warped occupancy is the same blend of `min(count, 1)`.
pub fn warp_bilinear(src: &BevGrid, a: &Affine2D<f64>, tape: &mut Tape) -> Result<BevGrid, ContrastError> {
    let inv = affine2d_invert(a)?;
    let m = src.m();
    let mut taps = Vec::with_capacity(m * m);
    for row in 0..m {
        for col in 0..m {
            let (sc, sr) = source_position(&inv, src.spec(), row, col);
            let (c0, r0) = (sc.floor(), sr.floor());
            let (fc, fr) = (sc - c0, sr - r0);
            let corners = [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c0 + 1.0, (1.0 - fr) * fc),
                (r0 + 1.0, c0, fr * (1.0 - fc)),
                (r0 + 1.0, c0 + 1.0, fr * fc),
            ];
            let cell_taps = corners
                .into_iter()
                .filter(|&(_, _, w)| w != 0.0)
                .filter_map(|(r, c, w)| source_cell(src, r, c).map(|k| (k, w)))
                .collect();
            taps.push(cell_taps);
        }
    }
    apply_taps(src, taps, tape)
}

/// Nearest-cell backward warp: each destination copies the source cell whose
/// center is closest, rounding halves up on each axis.
pub fn warp_nearest(src: &BevGrid, a: &Affine2D<f64>, tape: &mut Tape) -> Result<BevGrid, ContrastError> {
    let inv = affine2d_invert(a)?;
    let m = src.m();
    let mut taps = Vec::with_capacity(m * m);
    for row in 0..m {
        for col in 0..m {
            let (sc, sr) = source_position(&inv, src.spec(), row, col);
            let tap = source_cell(src, (sr + 0.5).floor(), (sc + 0.5).floor()).map(|k| (k, 1.0));
            taps.push(tap.into_iter().collect());
        }
    }
    apply_taps(src, taps, tape)
}

/// Registers `cloud` with `rel`, then pools `features` into the reference grid.
pub fn align_exact3d(
    features: Var,
    cloud: &PointCloud,
    rel: &RigidTransform<f64>,
    cell_size: f64,
    m: usize,
    tape: &mut Tape,
) -> Result<BevGrid, ContrastError> {
    Ok(bev_pool(features, &register_3d(cloud, rel), cell_size, m, tape)?)
}

/// Cells occupied in the reference grid and with warped occupancy above
/// `occupancy_eps` in the aligned grid, in row-major order.
pub fn qualifying_cells(b_grid: &BevGrid, bt_grid: &BevGrid, occupancy_eps: f64) -> Result<Vec<CellIndex>, ContrastError> {
    if b_grid.spec() != bt_grid.spec() {
        return Err(ContrastError::GridMismatch(b_grid.spec(), bt_grid.spec()));
    }
    let m = b_grid.m();
    Ok((0..m * m)
        .filter(|&k| b_grid.counts()[k] > 0 && bt_grid.occupancy()[k] > occupancy_eps)
        .map(|k| CellIndex::from_flat(k, m))
        .collect())
}

/// Uniform sample without replacement of at most `n_samples` qualifying
/// cells, deterministic in `cfg.seed`, returned in row-major order.
pub fn sample_cells(b_grid: &BevGrid, bt_grid: &BevGrid, cfg: &LossConfig) -> Result<Vec<CellIndex>, ContrastError> {
    let candidates = qualifying_cells(b_grid, bt_grid, cfg.occupancy_eps)?;
    if candidates.is_empty() {
        return Err(ContrastError::EmptyOverlap);
    }
    if candidates.len() <= cfg.n_samples {
        return Ok(candidates);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), cfg.n_samples).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| candidates[i]).collect())
}

/// `L = -sum_l log( exp(bt_l . b_l / tau) / sum_m exp(bt_l . b_m / tau) )`
/// over the given cells, with both grids' rows l2-normalized first. Anchors
/// come from `bt_grid` (the aligned second scan), candidates from `b_grid`.
pub fn contrastive_loss(b_grid: &BevGrid, bt_grid: &BevGrid, cells: &[CellIndex], tau: f64, tape: &mut Tape) -> Result<Var, ContrastError> {
    if cells.len() < 2 {
        return Err(ContrastError::TooFewCells(cells.len()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ContrastError::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    if b_grid.spec() != bt_grid.spec() {
        return Err(ContrastError::GridMismatch(b_grid.spec(), bt_grid.spec()));
    }
    let m = b_grid.m();
    let index: Vec<usize> = cells.iter().map(|c| c.flat(m)).collect();

    let b_all = b_grid.var(tape)?;
    let bt_all = bt_grid.var(tape)?;
    let b_rows = tape.gather_rows(b_all, &index)?;
    let bt_rows = tape.gather_rows(bt_all, &index)?;
    let b_n = tape.l2_normalize_rows(b_rows, NORMALIZE_EPS)?;
    let bt_n = tape.l2_normalize_rows(bt_rows, NORMALIZE_EPS)?;

    let b_t = tape.transpose(b_n)?;
    let sims = tape.matmul(bt_n, b_t)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    let lse = tape.log_sum_exp_rows(logits)?;
    let lse_sum = tape.reduce_sum(lse)?;

    let pos = tape.mul(bt_n, b_n)?;
    let pos_sum = tape.reduce_sum(pos)?;
    let pos_term = tape.scale(pos_sum, -1.0 / tau)?;
    Ok(tape.add(lse_sum, pos_term)?)
}

/// Aligns the pooled second grid (or, for [`AlignMode::Exact3D`], the second
/// scan's points) onto the reference grid.
pub fn align(
    mode: AlignMode,
    pooled_second: &BevGrid,
    second_features: Var,
    second_cloud: &PointCloud,
    rel: &RigidTransform<f64>,
    tape: &mut Tape,
) -> Result<BevGrid, ContrastError> {
    let affine = crate::geometry::affine2d_from_se3(rel);
    match mode {
        AlignMode::Bilinear2D => warp_bilinear(pooled_second, &affine, tape),
        AlignMode::Nearest2D => warp_nearest(pooled_second, &affine, tape),
        AlignMode::Exact3D => {
            let spec = pooled_second.spec();
            align_exact3d(second_features, second_cloud, rel, spec.cell_size(), spec.m(), tape)
        }
    }
}
