//! Pinhole camera with Brown–Conrady radial-tangential distortion.

use std::fmt::Write as _;
use std::path::Path;

use super::{GeometryError, SphericalPoint, Vec2, Vec3};
use crate::kv::KvFile;

const UNDISTORT_MAX_ITERATIONS: usize = 50;
const UNDISTORT_TOLERANCE: f64 = 1e-10;

/// Distortion coefficients in OpenCV order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        *self == Distortion::default()
    }

    /// Forward model on normalized image coordinates.
    #[inline]
    pub fn apply(&self, n: &Vec2) -> Vec2 {
        let (x, y) = (n.x, n.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let xy = x * y;
        Vec2::new(
            x * radial + 2.0 * self.p1 * xy + self.p2 * (r2 + 2.0 * x * x),
            y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * xy,
        )
    }

    /// Inverts [`Distortion::apply`] by damped fixed-point iteration.
    /// Returns the solution and the final forward residual.
    fn invert(&self, distorted: &Vec2) -> (Vec2, f64, bool) {
        if self.is_zero() {
            return (*distorted, 0.0, true);
        }
        let residual = |n: &Vec2| (self.apply(n) - distorted).norm();
        let mut x = *distorted;
        let mut err = residual(&x);
        let mut damping = 1.0;
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            if err < UNDISTORT_TOLERANCE {
                return (x, err, true);
            }
            let (nx, ny) = (x.x, x.y);
            let r2 = nx * nx + ny * ny;
            let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
            let tangential = Vec2::new(
                2.0 * self.p1 * nx * ny + self.p2 * (r2 + 2.0 * nx * nx),
                self.p1 * (r2 + 2.0 * ny * ny) + 2.0 * self.p2 * nx * ny,
            );
            let target = (distorted - tangential) / radial;
            let mut candidate = x + (target - x) * damping;
            let mut cand_err = residual(&candidate);
            while cand_err >= err && damping > 1e-4 {
                damping *= 0.5;
                candidate = x + (target - x) * damping;
                cand_err = residual(&candidate);
            }
            if cand_err >= err {
                break;
            }
            x = candidate;
            err = cand_err;
            damping = (damping * 2.0).min(1.0);
        }
        (x, err, err < UNDISTORT_TOLERANCE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: Distortion,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        distortion: Distortion,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let cam = CameraModel { fx, fy, cx, cy, distortion, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Distortion-free camera.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        CameraModel { fx, fy, cx, cy, distortion: Distortion::default(), width, height }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |field, reason: &str| {
            Err(GeometryError::InvalidCamera { field, reason: reason.to_string() })
        };
        if !(self.fx.is_finite() && self.fx > 0.0) {
            return bad("fx", "must be positive");
        }
        if !(self.fy.is_finite() && self.fy > 0.0) {
            return bad("fy", "must be positive");
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return bad("cx", "principal point must be finite");
        }
        if self.width == 0 {
            return bad("width", "must be positive");
        }
        if self.height == 0 {
            return bad("height", "must be positive");
        }
        let d = &self.distortion;
        if ![d.k1, d.k2, d.p1, d.p2, d.k3].iter().all(|c| c.is_finite()) {
            return bad("k1", "distortion coefficients must be finite");
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self, GeometryError> {
        kv.check_keys(&["fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2", "k3", "width", "height"])?;
        let opt = |k| kv.get::<f64>(k).map(|v| v.unwrap_or(0.0));
        Self::new(
            kv.require("fx")?,
            kv.require("fy")?,
            kv.require("cx")?,
            kv.require("cy")?,
            Distortion { k1: opt("k1")?, k2: opt("k2")?, p1: opt("p1")?, p2: opt("p2")?, k3: opt("k3")? },
            kv.require("width")?,
            kv.require("height")?,
        )
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        Self::from_kv(&KvFile::read(path)?)
    }

    /// Calibration file text; `CameraModel::from_kv` reads it back exactly.
    pub fn to_kv_string(&self) -> String {
        let d = &self.distortion;
        let mut s = String::new();
        for (k, v) in [
            ("fx", self.fx),
            ("fy", self.fy),
            ("cx", self.cx),
            ("cy", self.cy),
            ("k1", d.k1),
            ("k2", d.k2),
            ("p1", d.p1),
            ("p2", d.p2),
            ("k3", d.k3),
        ] {
            let _ = writeln!(s, "{k} {v:?}");
        }
        let _ = writeln!(s, "width {}", self.width);
        let _ = writeln!(s, "height {}", self.height);
        s
    }

    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < self.width as f64 - 0.5
            && pixel.y < self.height as f64 - 0.5
    }

    /// Pixel → normalized coordinates without distortion removal.
    #[inline]
    fn pixel_to_normalized(&self, pixel: &Vec2) -> Vec2 {
        Vec2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    #[inline]
    fn normalized_to_pixel(&self, n: &Vec2) -> Vec2 {
        Vec2::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy)
    }

    /// Removes lens distortion, returning the ideal pinhole pixel.
    pub fn undistort(&self, pixel: &Vec2) -> Result<Vec2, GeometryError> {
        let (n, residual, ok) = self.distortion.invert(&self.pixel_to_normalized(pixel));
        if !ok {
            return Err(GeometryError::UndistortionDiverged { u: pixel.x, v: pixel.y, residual });
        }
        Ok(self.normalized_to_pixel(&n))
    }

    /// Applies lens distortion to an ideal pinhole pixel.
    pub fn distort(&self, ideal: &Vec2) -> Vec2 {
        self.normalized_to_pixel(&self.distortion.apply(&self.pixel_to_normalized(ideal)))
    }

    /// Undistort, back-project through `K⁻¹` and normalize onto the unit sphere.
    pub fn pixel_to_sphere(&self, pixel: &Vec2) -> Result<SphericalPoint, GeometryError> {
        let (n, residual, ok) = self.distortion.invert(&self.pixel_to_normalized(pixel));
        if !ok {
            return Err(GeometryError::UndistortionDiverged { u: pixel.x, v: pixel.y, residual });
        }
        SphericalPoint::from_vector(&Vec3::new(n.x, n.y, 1.0))
    }

    /// Forward projection of a direction with `z > 0`, distortion included.
    pub fn sphere_to_pixel(&self, p: &SphericalPoint) -> Result<Vec2, GeometryError> {
        self.project(p.vector())
    }

    /// Same as [`CameraModel::sphere_to_pixel`] for any direction vector.
    #[inline]
    pub fn project(&self, v: &Vec3) -> Result<Vec2, GeometryError> {
        if !(v.z > 0.0) {
            return Err(GeometryError::BehindCamera { z: v.z });
        }
        let n = Vec2::new(v.x / v.z, v.y / v.z);
        Ok(self.normalized_to_pixel(&self.distortion.apply(&n)))
    }

    /// Largest angle between the optical axis and any sensor corner ray.
    pub fn max_off_axis_angle(&self) -> Result<f64, GeometryError> {
        let w = self.width as f64 - 0.5;
        let h = self.height as f64 - 0.5;
        let mut best: f64 = 0.0;
        for (u, v) in [(-0.5, -0.5), (w, -0.5), (-0.5, h), (w, h), (self.cx, -0.5), (self.cx, h), (-0.5, self.cy), (w, self.cy)] {
            let p = self.pixel_to_sphere(&Vec2::new(u, v))?;
            best = best.max(p.vector().z.clamp(-1.0, 1.0).acos());
        }
        Ok(best)
    }
}

/// Precomputed unit bearing for every integer pixel of a sensor.
#[derive(Debug, Clone)]
pub struct BearingTable {
    width: u32,
    height: u32,
    bearings: Vec<SphericalPoint>,
}

impl BearingTable {
    pub fn new(camera: &CameraModel) -> Result<Self, GeometryError> {
        let mut bearings = Vec::with_capacity(camera.width as usize * camera.height as usize);
        for v in 0..camera.height {
            for u in 0..camera.width {
                bearings.push(camera.pixel_to_sphere(&Vec2::new(u as f64, v as f64))?);
            }
        }
        Ok(BearingTable { width: camera.width, height: camera.height, bearings })
    }

    /// Bearing of pixel `(u, v)`; `None` outside the sensor.
    #[inline]
    pub fn get(&self, u: u16, v: u16) -> Option<&SphericalPoint> {
        if (u as u32) < self.width && (v as u32) < self.height {
            self.bearings.get(v as usize * self.width as usize + u as usize)
        } else {
            None
        }
    }
}
