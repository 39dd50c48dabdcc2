//! Bird's-eye-view pooling: project point features onto the `z = 0` plane and
//! average them inside the `b x b` cells of an `M x M` grid.
//!
//! The grid is centered on the sensor origin with half-extent `H = M * b / 2`.
//! Cell `(i, j)` covers `x in [j*b - H, (j+1)*b - H)` and
//! `y in [i*b - H, (i+1)*b - H)`; its center is `((j+0.5)*b - H, (i+0.5)*b - H)`.
//! Features are stored row-major as an `[M*M, D]` tensor, cell `(i, j)` at row
//! `i * M + j`. Empty cells hold the zero vector.

use std::io::{self, Write};

use thiserror::Error;

use crate::autodiff::{Tape, TapeError, Tensor, Var};
use crate::{PointCloud, Scalar};

#[derive(Debug, Error)]
pub enum BevError {
    #[error("invalid grid: cell size {cell_size} (must be > 0), {m} cells per side (must be >= 1)")]
    InvalidGrid { cell_size: f64, m: usize },
    #[error("{features} feature rows for {points} points")]
    RowMismatch { features: usize, points: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Geometry of a square BEV grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    cell_size: f64,
    m: usize,
}

impl GridSpec {
    pub fn new(cell_size: f64, m: usize) -> Result<Self, BevError> {
        if !(cell_size > 0.0 && cell_size.is_finite()) || m < 1 {
            return Err(BevError::InvalidGrid { cell_size, m });
        }
        Ok(Self { cell_size, m })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// Cells per side.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_cells(&self) -> usize {
        self.m * self.m
    }

    pub fn half_extent(&self) -> f64 {
        self.m as f64 * self.cell_size / 2.0
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<CellIndex> {
        cell_of(x, y, self.cell_size, self.m)
    }

    /// Metric center of a cell.
    pub fn cell_center(&self, c: CellIndex) -> [f64; 2] {
        let h = self.half_extent();
        [(c.col as f64 + 0.5) * self.cell_size - h, (c.row as f64 + 0.5) * self.cell_size - h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

impl CellIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn flat(self, m: usize) -> usize {
        self.row * m + self.col
    }

    pub fn from_flat(k: usize, m: usize) -> Self {
        Self { row: k / m, col: k % m }
    }
}

/// Cell containing `(x, y)`, or `None` outside the grid. Cells are half-open,
/// so a point on the far edge is outside.
pub fn cell_of<T: Scalar>(x: T, y: T, b: T, m: usize) -> Option<CellIndex> {
    if !(b > T::zero()) || m == 0 {
        return None;
    }
    let mt = T::from_usize(m)?;
    let h = mt * b / T::lit(2.0);
    let j = ((x + h) / b).floor();
    let i = ((y + h) / b).floor();
    let inside = |v: T| v >= T::zero() && v < mt;
    if inside(i) && inside(j) {
        Some(CellIndex { row: i.to_usize()?, col: j.to_usize()? })
    } else {
        None
    }
}

/// Pooled (or ingested, or warped) BEV features with occupancy.
#[derive(Debug, Clone)]
pub struct BevGrid {
    spec: GridSpec,
    features: Tensor,
    node: Option<Var>,
    counts: Vec<u32>,
    occupancy: Vec<f64>,
    dropped: usize,
}

impl BevGrid {
    pub(crate) fn from_parts(spec: GridSpec, features: Tensor, node: Option<Var>, counts: Vec<u32>, occupancy: Vec<f64>, dropped: usize) -> Self {
        debug_assert_eq!(features.rows(), spec.n_cells());
        debug_assert_eq!(counts.len(), spec.n_cells());
        debug_assert_eq!(occupancy.len(), spec.n_cells());
        Self { spec, features, node, counts, occupancy, dropped }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// `[M*M, D]` feature values.
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature(&self, c: CellIndex) -> &[f64] {
        self.features.row(c.flat(self.spec.m))
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn count(&self, c: CellIndex) -> u32 {
        self.counts[c.flat(self.spec.m)]
    }

    /// Per-cell occupancy weight in `[0, 1]`: `min(count, 1)` for pooled grids,
    /// the interpolated value for warped ones.
    pub fn occupancy(&self) -> &[f64] {
        &self.occupancy
    }

    /// Points that fell outside the grid.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn occupied_cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        let m = self.spec.m;
        self.counts.iter().enumerate().filter(|(_, &c)| c > 0).map(move |(k, _)| CellIndex::from_flat(k, m))
    }

    /// Tape node holding the features, if the grid was built on a tape.
    pub fn node(&self) -> Option<Var> {
        self.node
    }

    /// Node to use on `tape`: the recorded one, or a fresh constant leaf.
    /// A grid built on another tape must not be passed here.
    pub fn var(&self, tape: &mut Tape) -> Result<Var, TapeError> {
        match self.node {
            Some(v) => Ok(v),
            None => tape.leaf(self.features.clone()),
        }
    }

    /// Writes `i,j,count,feat_0..feat_{D-1}` for every occupied cell, row-major.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header: Vec<String> = ["i", "j", "count"].iter().map(|s| s.to_string()).chain((0..self.dim()).map(|k| format!("feat_{k}"))).collect();
        writeln!(w, "{}", header.join(","))?;
        for c in self.occupied_cells() {
            let feats: Vec<String> = self.feature(c).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{},{}", c.row, c.col, self.count(c), feats.join(","))?;
        }
        Ok(())
    }
}

/// Averages the rows of `features` (`[n, D]`, one per point of `cloud`) per
/// cell. The gradient of a cell reaches each member row scaled by `1/count`.
pub fn bev_pool(features: Var, cloud: &PointCloud, cell_size: f64, m: usize, tape: &mut Tape) -> Result<BevGrid, BevError> {
    let spec = GridSpec::new(cell_size, m)?;
    let rows = tape.value(features).rows();
    if rows != cloud.len() {
        return Err(BevError::RowMismatch { features: rows, points: cloud.len() });
    }
    let groups: Vec<Option<usize>> = cloud.points.iter().map(|p| spec.cell_of(p.x, p.y).map(|c| c.flat(m))).collect();
    let node = tape.reduce_mean_by_group(features, &groups, spec.n_cells())?;
    let mut counts = vec![0u32; spec.n_cells()];
    let mut dropped = 0;
    for g in &groups {
        match g {
            Some(k) => counts[*k] += 1,
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::trace!("bev_pool: {dropped} of {} points outside the grid", cloud.len());
    }
    let occupancy = counts.iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }).collect();
    Ok(BevGrid::from_parts(spec, tape.value(node).clone(), Some(node), counts, occupancy, dropped))
}

/// Wraps features already laid out on a BEV grid (`[M, M, D]` or `[M*M, D]`).
/// Occupied cells get count 1, empty cells count 0 and are zeroed.
pub fn bev_native_ingest(grid_features: &Tensor, occupancy: &[bool], cell_size: f64) -> Result<BevGrid, BevError> {
    let shape = grid_features.shape();
    let (m, d) = match shape {
        [a, b, d] if a == b => (*a, *d),
        [n, d] => {
            let m = (*n as f64).sqrt().round() as usize;
            if m * m != *n {
                return Err(BevError::Shape { expected: vec![m * m, *d], got: shape.to_vec() });
            }
            (m, *d)
        }
        _ => return Err(BevError::Shape { expected: vec![0, 0, 0], got: shape.to_vec() }),
    };
    if occupancy.len() != m * m {
        return Err(BevError::Shape { expected: vec![m, m], got: vec![occupancy.len()] });
    }
    let spec = GridSpec::new(cell_size, m)?;
    let mut data = grid_features.data().to_vec();
    for (k, &occ) in occupancy.iter().enumerate() {
        if !occ {
            data[k * d..(k + 1) * d].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let features = Tensor::new(vec![m * m, d], data)?;
    let counts = occupancy.iter().map(|&o| o as u32).collect();
    let occ = occupancy.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    Ok(BevGrid::from_parts(spec, features, None, counts, occ, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Point;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pool_rows(rows: &[Vec<f64>], cloud: &PointCloud, b: f64, m: usize) -> BevGrid {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::from_rows(rows).unwrap()).unwrap();
        bev_pool(f, cloud, b, m, &mut tape).unwrap()
    }

    #[test]
    fn cell_of_examples() {
        assert_eq!(cell_of(0.1, 0.2, 1.0, 4), Some(CellIndex::new(2, 2)));
        assert_eq!(cell_of(-2.0, 0.0, 1.0, 4), Some(CellIndex::new(2, 0)));
        assert_eq!(cell_of(2.0, 0.0, 1.0, 4), None);
        assert_eq!(cell_of(0.0, 2.0, 1.0, 4), None);
        assert_eq!(cell_of(-2.0001, 0.0, 1.0, 4), None);
        // 512 cells of 20 cm span +-51.2 m.
        assert_eq!(cell_of(51.19, 0.0, 0.2, 512).map(|c| c.col), Some(511));
        assert_eq!(cell_of(-51.2, -51.2, 0.2, 512), Some(CellIndex::new(0, 0)));
        assert_eq!(cell_of(51.21, 0.0, 0.2, 512), None);
        assert_eq!(cell_of(0.1f32, 0.2f32, 1.0f32, 4), Some(CellIndex::new(2, 2)));
        assert_eq!(cell_of(f64::NAN, 0.0, 1.0, 4), None);
        assert_eq!(cell_of(0.0, 0.0, 0.0, 4), None);
    }

    #[test]
    fn grid_spec_rejects_bad_parameters() {
        assert!(GridSpec::new(0.0, 4).is_err());
        assert!(GridSpec::new(-1.0, 4).is_err());
        assert!(GridSpec::new(1.0, 0).is_err());
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(vec![1, 2])).unwrap();
        let c = PointCloud::new(vec![Point::default()]);
        assert!(matches!(bev_pool(f, &c, 0.0, 4, &mut tape), Err(BevError::InvalidGrid { .. })));
        let two = PointCloud::new(vec![Point::default(); 2]);
        assert!(matches!(bev_pool(f, &two, 1.0, 4, &mut tape), Err(BevError::RowMismatch { .. })));
    }

    #[test]
    fn single_point_occupies_one_cell() {
        let cloud = PointCloud::new(vec![Point::new(0.5, -1.5, 3.0, 0.2)]);
        let g = pool_rows(&[vec![0.3, -0.7]], &cloud, 1.0, 4);
        let cell = CellIndex::new(0, 2);
        assert_eq!(g.feature(cell), &[0.3, -0.7]);
        assert_eq!(g.count(cell), 1);
        for k in 0..16 {
            if k != cell.flat(4) {
                assert_eq!(g.counts()[k], 0);
                assert!(g.features().row(k).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn two_points_average() {
        let cloud = PointCloud::new(vec![Point::new(0.1, 0.1, 0.0, 0.0), Point::new(0.9, 0.8, 5.0, 0.0)]);
        let g = pool_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &cloud, 1.0, 4);
        assert_eq!(g.feature(CellIndex::new(2, 2)), &[0.5, 0.5]);
        assert_eq!(g.count(CellIndex::new(2, 2)), 2);
    }

    #[test]
    fn out_of_range_points_are_dropped() {
        let cloud = PointCloud::new(vec![Point::new(0.1, 0.1, 0.0, 0.0), Point::new(10.0, 0.0, 0.0, 0.0)]);
        let g = pool_rows(&[vec![1.0, 2.0], vec![5.0, 5.0]], &cloud, 1.0, 4);
        assert_eq!(g.dropped(), 1);
        assert_eq!(g.counts().iter().sum::<u32>(), 1);
    }

    #[test]
    fn pooling_gradient_distributes_inverse_count() {
        let cloud = PointCloud::new(vec![
            Point::new(0.1, 0.1, 0.0, 0.0),
            Point::new(0.2, 0.3, 0.0, 0.0),
            Point::new(0.7, 0.1, 0.0, 0.0),
            Point::new(-1.5, 0.1, 0.0, 0.0),
            Point::new(9.0, 9.0, 0.0, 0.0),
        ]);
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(vec![5, 1])).unwrap();
        let g = bev_pool(f, &cloud, 1.0, 4, &mut tape).unwrap();
        let s = tape.reduce_sum(g.node().unwrap()).unwrap();
        let grads = tape.backward(s).unwrap();
        let gf = grads.get(f).unwrap().data().to_vec();
        let third = 1.0 / 3.0;
        assert_eq!(gf, vec![third, third, third, 1.0, 0.0]);
    }

    #[test]
    fn native_ingest_cases() {
        let zeros = bev_native_ingest(&Tensor::zeros(vec![3, 3, 2]), &[false; 9], 0.5).unwrap();
        assert!(zeros.counts().iter().all(|&c| c == 0));
        let mut data = vec![0.0; 18];
        data[8] = 1.5;
        data[9] = -2.5;
        let mut occ = [false; 9];
        occ[4] = true;
        let g = bev_native_ingest(&Tensor::new(vec![3, 3, 2], data).unwrap(), &occ, 0.5).unwrap();
        assert_eq!(g.feature(CellIndex::new(1, 1)), &[1.5, -2.5]);
        assert_eq!(g.count(CellIndex::new(1, 1)), 1);
        assert!(bev_native_ingest(&Tensor::zeros(vec![3, 3, 2]), &[false; 8], 0.5).is_err());
        assert!(bev_native_ingest(&Tensor::zeros(vec![8, 2]), &[false; 8], 0.5).is_err());
    }

    #[test]
    fn pooled_grid_survives_native_ingest() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Point> = (0..60).map(|_| Point::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.0, 0.0)).collect();
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let g = pool_rows(&rows, &PointCloud::new(pts), 0.5, 8);
        let occ: Vec<bool> = g.counts().iter().map(|&c| c > 0).collect();
        let back = bev_native_ingest(g.features(), &occ, 0.5).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.features()), bits(g.features()));
    }

    #[test]
    fn csv_dump_lists_occupied_cells() {
        let cloud = PointCloud::new(vec![Point::new(0.1, 0.1, 0.0, 0.0), Point::new(-1.9, -1.9, 0.0, 0.0)]);
        let g = pool_rows(&[vec![1.0, 0.25], vec![-3.0, 0.5]], &cloud, 1.0, 4);
        let mut out = Vec::new();
        g.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "i,j,count,feat_0,feat_1\n0,0,1,-3,0.5\n2,2,1,1,0.25\n");
    }
}
