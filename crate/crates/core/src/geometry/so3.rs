//! Rotation group primitives: hat/vee, exponential and logarithm maps, and a
//! validated [`Rotation`] newtype with matrix semantics.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};

use super::GeometryError;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on `RᵀR = I` (per entry) and `det R = 1`.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

const SMALL_ANGLE: f64 = 1e-8;
const NEAR_PI: f64 = 1e-6;

/// Skew-symmetric matrix with `hat(v) * w == v.cross(&w)`.
#[rustfmt::skip]
#[inline]
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(
         0.0, -v.z,  v.y,
         v.z,  0.0, -v.x,
        -v.y,  v.x,  0.0,
    )
}

/// Inverse of [`hat`]. Does not check skew-symmetry.
#[inline]
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m.m32, m.m13, m.m21)
}

/// Rodrigues formula; Taylor expansion below `1e-8` rad.
pub fn exp_map(v: &Vec3) -> Rotation {
    Rotation(exp_matrix(v))
}

#[inline]
pub(crate) fn exp_matrix(v: &Vec3) -> Mat3 {
    let theta_sq = v.norm_squared();
    let k = hat(v);
    let (a, b) = if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Logarithm map returning the rotation vector with angle in `[0, π]`.
///
/// The input must satisfy the rotation invariants; anything further than
/// [`ROTATION_TOLERANCE`] from SO(3) is rejected.
pub fn log_map(r: &Mat3) -> Result<Vec3, GeometryError> {
    check_rotation(r)?;
    Ok(log_unchecked(r))
}

pub(crate) fn log_unchecked(r: &Mat3) -> Vec3 {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let skew = Vec3::new(r.m32 - r.m23, r.m13 - r.m31, r.m21 - r.m12);
    // skew = 2 sin θ · axis
    let sin_theta = 0.5 * skew.norm();
    if cos_theta > 0.0 && sin_theta < SMALL_ANGLE {
        // θ / sin θ = 1 + O(θ²)
        return skew * 0.5;
    }
    if 1.0 + cos_theta < NEAR_PI {
        return log_near_pi(r, cos_theta, &skew);
    }
    let theta = sin_theta.atan2(cos_theta);
    skew * (0.5 * theta / sin_theta)
}

/// Near θ = π the antisymmetric part vanishes; recover the axis from the
/// symmetric part `R + Rᵀ = 2 cos θ I + 2 (1 − cos θ) a aᵀ`.
fn log_near_pi(r: &Mat3, cos_theta: f64, skew: &Vec3) -> Vec3 {
    let sym = (r + r.transpose()) * 0.5;
    let denom = 1.0 - cos_theta;
    let diag = Vec3::new(
        ((sym.m11 - cos_theta) / denom).max(0.0),
        ((sym.m22 - cos_theta) / denom).max(0.0),
        ((sym.m33 - cos_theta) / denom).max(0.0),
    );
    let i = diag.imax();
    let mut axis = Vec3::zeros();
    axis[i] = diag[i].sqrt();
    for j in 0..3 {
        if j != i {
            axis[j] = sym[(i, j)] / (denom * axis[i]);
        }
    }
    axis.normalize_mut();
    // Pick the sign that agrees with the (tiny) antisymmetric part.
    if axis.dot(skew) < 0.0 {
        axis = -axis;
    }
    let sin_theta = 0.5 * skew.norm();
    let theta = sin_theta.atan2(cos_theta);
    axis * theta
}

fn check_rotation(m: &Mat3) -> Result<(), GeometryError> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(GeometryError::NotARotation { deviation: f64::INFINITY });
    }
    let gram = m.transpose() * m - Mat3::identity();
    let orth = gram.amax();
    let det = (m.determinant() - 1.0).abs();
    let deviation = orth.max(det);
    if deviation > ROTATION_TOLERANCE {
        return Err(GeometryError::NotARotation { deviation });
    }
    Ok(())
}

/// Element of SO(3) stored as a 3×3 matrix.
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Validates the matrix against [`ROTATION_TOLERANCE`]; never repairs it.
    pub fn from_matrix(m: Mat3) -> Result<Self, GeometryError> {
        check_rotation(&m)?;
        Ok(Rotation(m))
    }

    /// Wraps a matrix that the caller guarantees is a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Projects an arbitrary nonsingular matrix onto the closest rotation
    /// (polar decomposition through SVD). This is the only repair path.
    pub fn orthonormalized(m: &Mat3) -> Result<Self, GeometryError> {
        let svd = m.svd(true, true);
        let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
            return Err(GeometryError::NotARotation { deviation: f64::INFINITY });
        };
        let mut d = Mat3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Ok(Rotation(u * d * v_t))
    }

    pub fn exp(v: &Vec3) -> Self {
        exp_map(v)
    }

    /// Rotation vector; `‖log‖ ∈ [0, π]`.
    pub fn log(&self) -> Vec3 {
        log_unchecked(&self.0)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Geodesic angle `‖log(selfᵀ other)‖` in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).angle()
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Right-multiplicative update `self · exp(delta)`.
    pub fn retract(&self, delta: &Vec3) -> Self {
        Rotation(self.0 * exp_matrix(delta))
    }

    pub fn to_quaternion(&self) -> nalgebra::UnitQuaternion<f64> {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        nalgebra::UnitQuaternion::from_rotation_matrix(&rot)
    }

    pub fn from_quaternion(q: &nalgebra::UnitQuaternion<f64>) -> Self {
        Rotation(*q.to_rotation_matrix().matrix())
    }

    /// Maximum per-entry deviation of `RᵀR` from identity, and of `det R` from 1.
    pub fn deviation(&self) -> f64 {
        let gram = (self.0.transpose() * self.0 - Mat3::identity()).amax();
        gram.max((self.0.determinant() - 1.0).abs())
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.log();
        write!(f, "Rotation(log = [{:.9}, {:.9}, {:.9}])", v.x, v.y, v.z)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for Rotation {
    type Output = Vec3;

    fn mul(self, v: &Vec3) -> Vec3 {
        self.0 * v
    }
}

impl Mul<&Vec3> for &Rotation {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Right Jacobian of SO(3): `exp(θ + δ) ≈ exp(θ) exp(J_r(θ) δ)`.
pub fn right_jacobian(theta: &Vec3) -> Mat3 {
    let angle_sq = theta.norm_squared();
    let k = hat(theta);
    let (a, b) = if angle_sq < 1e-10 {
        (0.5 - angle_sq / 24.0, 1.0 / 6.0 - angle_sq / 120.0)
    } else {
        let angle = angle_sq.sqrt();
        (
            (1.0 - angle.cos()) / angle_sq,
            (angle - angle.sin()) / (angle_sq * angle),
        )
    };
    Mat3::identity() - k * a + k * k * b
}
