//! Rigid transforms, point registration, and the planar affine approximation
//! used to align BEV grids.
//!
//! A [`RigidTransform`] maps points from a source frame into a target frame,
//! `p_target = R * p_source + t`. Poses are world-from-sensor transforms.
//! [`Affine2D`] keeps the top-left 2x2 block of `R` and the first two entries
//! of `t`, dropping every dependency on height. It stays in metric units;
//! conversion to grid cells is done by the warp code.

use thiserror::Error;

use crate::{PointCloud, Scalar};

/// Tolerance on `|R^T R - I|` (max entry) and on `|det R - 1|`.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Determinant magnitude below which a planar map is treated as singular.
pub const SINGULAR_DETERMINANT: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal: max |R^T R - I| = {ortho_error:e}, det = {det}")]
    NotOrthonormal { ortho_error: f64, det: f64 },
    #[error("non-finite entry in transform")]
    NonFinite,
    #[error("affine map is singular: |det| = {det:e}")]
    Singular { det: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    /// Row-major rotation matrix.
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
}

impl<T: Scalar> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> RigidTransform<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { rotation: [[o, z, z], [z, o, z], [z, z, o]], translation: [z; 3] }
    }

    /// Builds a transform and checks the rotation against [`ROTATION_TOLERANCE`].
    pub fn new(rotation: [[T; 3]; 3], translation: [T; 3]) -> Result<Self, GeometryError> {
        let tf = Self { rotation, translation };
        tf.validate()?;
        Ok(tf)
    }

    pub fn from_translation(translation: [T; 3]) -> Self {
        Self { translation, ..Self::identity() }
    }

    /// Rotation by `angle` radians about the z axis.
    pub fn rotation_z(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self { rotation: [[c, -s, z], [s, c, z], [z, z, o]], translation: [z; 3] }
    }

    /// Rotation by `angle` radians about the x axis.
    pub fn rotation_x(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self { rotation: [[o, z, z], [z, c, -s], [z, s, c]], translation: [z; 3] }
    }

    /// Rotation by `angle` radians about the y axis.
    pub fn rotation_y(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self { rotation: [[c, z, s], [z, o, z], [-s, z, c]], translation: [z; 3] }
    }

    /// Same rotation, translation replaced.
    pub fn with_translation(mut self, translation: [T; 3]) -> Self {
        self.translation = translation;
        self
    }

    /// Reads a row-major 3x4 matrix `[R | t]` without validation.
    pub fn from_rows_3x4(m: &[T; 12]) -> Self {
        Self {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: [m[3], m[7], m[11]],
        }
    }

    pub fn to_rows_3x4(&self) -> [T; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], //
            r[1][0], r[1][1], r[1][2], t[1], //
            r[2][0], r[2][1], r[2][2], t[2],
        ]
    }

    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Rotates a direction (no translation).
    pub fn rotate(&self, v: [T; 3]) -> [T; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut rotation = [[T::zero(); 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Self { rotation, translation: self.apply(other.translation) }
    }

    /// Inverse assuming an orthonormal rotation: `(R^T, -R^T t)`.
    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rotation = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let inv = Self { rotation, translation: [T::zero(); 3] };
        let t = inv.rotate(self.translation);
        inv.with_translation([-t[0], -t[1], -t[2]])
    }

    pub fn determinant(&self) -> T {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    /// Max absolute entry of `R^T R - I`.
    pub fn orthonormality_error(&self) -> T {
        let r = &self.rotation;
        let mut worst = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let dot = r[0][i] * r[0][j] + r[1][i] * r[1][j] + r[2][i] * r[2][j];
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = self.rotation.iter().flatten().chain(self.translation.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::NonFinite);
        }
        let tol = T::lit(ROTATION_TOLERANCE);
        let ortho = self.orthonormality_error();
        let det = self.determinant();
        if ortho >= tol || (det - T::one()).abs() >= tol {
            return Err(GeometryError::NotOrthonormal {
                ortho_error: ortho.to_f64().unwrap_or(f64::NAN),
                det: det.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(())
    }

    /// Max absolute entry-wise difference between two transforms.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        let a = self.to_rows_3x4();
        let b = other.to_rows_3x4();
        a.iter().zip(b.iter()).fold(T::zero(), |m, (x, y)| m.max((*x - *y).abs()))
    }
}

/// Transform registering frame `b` onto frame `a` given both world-from-sensor
/// poses: `pose_a^-1 * pose_b`.
pub fn relative_transform<T: Scalar>(pose_a: &RigidTransform<T>, pose_b: &RigidTransform<T>) -> RigidTransform<T> {
    pose_a.inverse().compose(pose_b)
}

/// Applies `rel` to every point; intensity and order are kept.
pub fn register_3d(cloud: &PointCloud, rel: &RigidTransform<f64>) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let [x, y, z] = rel.apply(p.xyz());
            crate::Point { x, y, z, intensity: p.intensity }
        })
        .collect();
    PointCloud { points, scan_id: cloud.scan_id, timestamp: cloud.timestamp }
}

/// Planar affine map `q = A p + offset` in metric units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2D<T> {
    /// Row-major 2x2 linear part.
    pub linear: [[T; 2]; 2],
    pub offset: [T; 2],
}

impl<T: Scalar> Default for Affine2D<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> Affine2D<T> {
    pub fn new(linear: [[T; 2]; 2], offset: [T; 2]) -> Self {
        Self { linear, offset }
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { linear: [[o, z], [z, o]], offset: [z, z] }
    }

    pub fn translation(dx: T, dy: T) -> Self {
        Self { offset: [dx, dy], ..Self::identity() }
    }

    pub fn apply(&self, p: [T; 2]) -> [T; 2] {
        let a = &self.linear;
        [
            a[0][0] * p[0] + a[0][1] * p[1] + self.offset[0],
            a[1][0] * p[0] + a[1][1] * p[1] + self.offset[1],
        ]
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.linear;
        let b = &other.linear;
        let linear = [
            [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
            [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
        ];
        Self { linear, offset: self.apply(other.offset) }
    }

    pub fn determinant(&self) -> T {
        let a = &self.linear;
        a[0][0] * a[1][1] - a[0][1] * a[1][0]
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().flatten().chain(self.offset.iter()).all(|v| v.is_finite())
    }

    pub fn invert(&self) -> Result<Self, GeometryError> {
        affine2d_invert(self)
    }
}

/// Truncates `rel` to its planar part: `A = R[0..2][0..2]`, `offset = t[0..2]`.
/// No re-orthonormalization is applied, even for tilted rotations.
pub fn affine2d_from_se3<T: Scalar>(rel: &RigidTransform<T>) -> Affine2D<T> {
    let r = &rel.rotation;
    Affine2D { linear: [[r[0][0], r[0][1]], [r[1][0], r[1][1]]], offset: [rel.translation[0], rel.translation[1]] }
}

pub fn affine2d_invert<T: Scalar>(a: &Affine2D<T>) -> Result<Affine2D<T>, GeometryError> {
    let det = a.determinant();
    if !det.is_finite() || det.abs() <= T::lit(SINGULAR_DETERMINANT) {
        return Err(GeometryError::Singular { det: det.to_f64().unwrap_or(f64::NAN) });
    }
    let m = &a.linear;
    let linear = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let inv = Affine2D { linear, offset: [T::zero(); 2] };
    let o = inv.apply(a.offset);
    Ok(Affine2D { linear, offset: [-o[0], -o[1]] })
}
