//! Rotation primitives and the camera model that takes pixels onto the unit
//! sphere and back.

mod camera;
mod so3;

pub use camera::{BearingTable, CameraModel, Distortion};
pub use so3::{
    exp_map, hat, log_map, right_jacobian, vee, Mat3, Rotation, Vec3, ROTATION_TOLERANCE,
};
pub(crate) use so3::exp_matrix;

use thiserror::Error;

use crate::kv::KvError;

pub type Vec2 = nalgebra::Vector2<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("matrix is not a rotation (deviation {deviation:.3e})")]
    NotARotation { deviation: f64 },
    #[error("undistortion of pixel ({u}, {v}) did not converge (residual {residual:.3e})")]
    UndistortionDiverged { u: f64, v: f64, residual: f64 },
    #[error("direction has z = {z}, not in front of the camera")]
    BehindCamera { z: f64 },
    #[error("invalid camera parameter `{field}`: {reason}")]
    InvalidCamera { field: &'static str, reason: String },
    #[error("vector of norm {norm} cannot be a spherical point")]
    NotUnit { norm: f64 },
    #[error(transparent)]
    Calibration(#[from] KvError),
}

/// A direction on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
#[repr(transparent)]
pub struct SphericalPoint(Vec3);

impl SphericalPoint {
    pub const UNIT_TOLERANCE: f64 = 1e-12;

    /// Normalizes `v`; fails for zero or non-finite input.
    pub fn from_vector(v: &Vec3) -> Result<Self, GeometryError> {
        let norm = v.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(GeometryError::NotUnit { norm });
        }
        Ok(SphericalPoint(v / norm))
    }

    /// Accepts `v` only if it is already unit length.
    pub fn new(v: Vec3) -> Result<Self, GeometryError> {
        let norm = v.norm();
        if (norm - 1.0).abs() > Self::UNIT_TOLERANCE {
            return Err(GeometryError::NotUnit { norm });
        }
        Ok(SphericalPoint(v))
    }

    #[inline]
    pub(crate) fn new_unchecked(v: Vec3) -> Self {
        SphericalPoint(v)
    }

    #[inline]
    pub fn vector(&self) -> &Vec3 {
        &self.0
    }

    #[inline]
    pub fn rotated(&self, r: &Rotation) -> SphericalPoint {
        SphericalPoint(r * &self.0)
    }

    /// Great-circle angle in radians.
    pub fn angle_to(&self, other: &SphericalPoint) -> f64 {
        self.0.cross(&other.0).norm().atan2(self.0.dot(&other.0))
    }
}

/// A rotation with its timestamp in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedRotation {
    pub t: f64,
    pub rotation: Rotation,
}

impl StampedRotation {
    pub fn new(t: f64, rotation: Rotation) -> Self {
        StampedRotation { t, rotation }
    }
}

impl From<SphericalPoint> for Vec3 {
    fn from(p: SphericalPoint) -> Vec3 {
        p.0
    }
}
