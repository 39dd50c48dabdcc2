//! Self-supervised pretraining of per-point Lidar encoders by contrasting
//! bird's-eye-view (BEV) cells across pairs of registered scans.
//!
//! The pipeline for one scan pair `(P, P')` with known relative pose is:
//!
//! 1. encode every point of both scans with a small MLP ([`encoder`]),
//! 2. average point features inside the `b x b` cells of an `M x M` grid ([`bev`]),
//! 3. bring the grid of `P'` into the frame of `P` ([`contrast`]), either by
//!    bilinear or nearest-cell backward warping with the planar part of the
//!    relative pose, or by registering the points in 3D before pooling,
//! 4. sample cells occupied in both grids and evaluate a cell-level InfoNCE
//!    loss, differentiated end to end by a small reverse-mode tape ([`autodiff`]).
//!
//! [`trainer`] drives AdamW with cosine annealing over many pairs, [`io_kitti`]
//! reads and writes KITTI odometry layouts, and [`synthbench`] provides labeled
//! synthetic street scenes plus a linear probe for judging learned features.
//!
//! Geometry, grid indexing, the schedule and the optimizer update are generic
//! over the floating-point type ([`Scalar`]); concrete aliases for `f32` and
//! `f64` live at the crate root. The differentiable path runs in `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bev;
pub mod cloud;
pub mod contrast;
pub mod encoder;
pub mod geometry;
pub mod gradcheck;
pub mod io_kitti;
pub mod synthbench;
pub mod trainer;

mod scalar;

pub use cloud::{Point, PointCloud};
pub use scalar::Scalar;

/// Rigid transform in double precision, the type used by the pipeline.
pub type RigidTransformF64 = geometry::RigidTransform<f64>;
pub type RigidTransformF32 = geometry::RigidTransform<f32>;
/// Planar affine map in double precision.
pub type Affine2DF64 = geometry::Affine2D<f64>;
pub type Affine2DF32 = geometry::Affine2D<f32>;
pub type OptimizerStateF64 = trainer::OptimizerState<f64>;
