//! Cylindrical panorama rendering of spherical points.

use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::frontend::Event;
use crate::geometry::{BearingTable, Mat3, Rotation, SphericalPoint, StampedRotation, Vec2, Vec3};

#[derive(Debug, Error)]
pub enum PanoramaError {
    #[error("point at a pole has no azimuth")]
    Pole,
    #[error("invalid panorama setting `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanoramaSpec {
    /// Horizontal span in radians.
    pub phi_h: f64,
    /// Vertical field of view in radians.
    pub phi_v: f64,
    pub width: u32,
    pub height: u32,
    /// Fraction of nonzero counts that stays below full white.
    pub percentile: f64,
}

impl Default for PanoramaSpec {
    fn default() -> Self {
        PanoramaSpec { phi_h: TAU, phi_v: 90f64.to_radians(), width: 2000, height: 1000, percentile: 0.9 }
    }
}

impl PanoramaSpec {
    pub fn validate(&self) -> Result<(), PanoramaError> {
        let bad = |field, reason: &str| Err(PanoramaError::InvalidSpec { field, reason: reason.into() });
        if !(self.phi_h > 0.0 && self.phi_h <= TAU) {
            return bad("phi_h", "must lie in (0, 2π]");
        }
        if !(self.phi_v > 0.0 && self.phi_v < PI) {
            return bad("phi_v", "must lie in (0, π)");
        }
        if self.width == 0 {
            return bad("width", "must be positive");
        }
        if self.height == 0 {
            return bad("height", "must be positive");
        }
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return bad("percentile", "must lie in (0, 1]");
        }
        Ok(())
    }

    fn z_max(&self) -> f64 {
        (0.5 * self.phi_v).tan()
    }
}

/// Maps camera coordinates (x right, y down, z forward) to panorama
/// coordinates with the cylinder axis pointing up and azimuth increasing to
/// the right, so the unwrapped image reads like the camera view. The map
/// has determinant -1, which is why it is a plain matrix and only used for display.
pub fn camera_to_panorama_view() -> Mat3 {
    Mat3::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

/// Radial projection onto the unit cylinder around the z axis.
pub fn sphere_to_cylinder(p: &SphericalPoint) -> Result<Vec3, PanoramaError> {
    let v = p.vector();
    let rho = v.x.hypot(v.y);
    if rho == 0.0 {
        return Err(PanoramaError::Pole);
    }
    Ok(v / rho)
}

/// Continuous pixel coordinates `(column, row)`, or `None` outside the spec.
pub fn cylinder_to_pixel(pc: &Vec3, spec: &PanoramaSpec) -> Option<Vec2> {
    let z_max = spec.z_max();
    if pc.z.abs() > z_max {
        return None;
    }
    let azimuth = pc.y.atan2(pc.x).rem_euclid(TAU);
    if azimuth > spec.phi_h {
        return None;
    }
    let column = azimuth / spec.phi_h * spec.width as f64;
    let row = (z_max - pc.z) / (2.0 * z_max) * spec.height as f64;
    Some(Vec2::new(column, row))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanoramaImage {
    pub width: u32,
    pub height: u32,
    /// Row-major accumulation counts.
    pub counts: Vec<u32>,
    /// Row-major 8-bit view of `counts`.
    pub pixels: Vec<u8>,
}

impl PanoramaImage {
    pub fn count(&self, column: u32, row: u32) -> u32 {
        self.counts[(row * self.width + column) as usize]
    }

    pub fn intensity(&self, column: u32, row: u32) -> u8 {
        self.pixels[(row * self.width + column) as usize]
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), PanoramaError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }
}

/// Reads a binary PGM with maxval 255; returns `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>), PanoramaError> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PanoramaError::Pgm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(PanoramaError::Pgm(format!("unsupported header {fields:?}")));
    }
    let dim = |s: &str| s.parse::<u32>().map_err(|e| PanoramaError::Pgm(format!("{s:?}: {e}")));
    let (w, h) = (dim(&fields[1])?, dim(&fields[2])?);
    let data = &bytes[pos + 1..];
    if data.len() != (w * h) as usize {
        return Err(PanoramaError::Pgm(format!("expected {} pixels, found {}", w * h, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

/// Accumulates points into the count grid and normalizes by the percentile.
pub fn render_panorama<'a, I>(points: I, spec: &PanoramaSpec) -> Result<PanoramaImage, PanoramaError>
where
    I: IntoIterator<Item = &'a SphericalPoint>,
{
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut counts = vec![0u32; (w * h) as usize];
    for p in points {
        let Ok(pc) = sphere_to_cylinder(p) else { continue };
        let Some(px) = cylinder_to_pixel(&pc, spec) else { continue };
        let column = (px.x.floor() as u32).min(w - 1);
        let row = (px.y.floor() as u32).min(h - 1);
        counts[(row * w + column) as usize] += 1;
    }
    let pixels = normalize_counts(&counts, spec.percentile);
    Ok(PanoramaImage { width: w, height: h, counts, pixels })
}

/// Nearest-rank percentile of the nonzero counts maps to 255.
fn normalize_counts(counts: &[u32], percentile: f64) -> Vec<u8> {
    let mut nonzero: Vec<u32> = counts.iter().copied().filter(|&c| c > 0).collect();
    if nonzero.is_empty() {
        return vec![0; counts.len()];
    }
    nonzero.sort_unstable();
    let rank = ((percentile * nonzero.len() as f64).ceil() as usize).clamp(1, nonzero.len());
    let reference = nonzero[rank - 1] as f64;
    counts
        .iter()
        .map(|&c| (255.0 * c as f64 / reference).round().min(255.0) as u8)
        .collect()
}

/// Events in `[end - window, end)`, each lifted to the sphere and rotated by
/// the pose of the frame it belongs to (the latest pose not after it).
pub fn event_window_points(
    events: &[Event],
    table: &BearingTable,
    poses: &[StampedRotation],
    end: f64,
    window: f64,
) -> Vec<SphericalPoint> {
    let start = end - window;
    let lo = events.partition_point(|e| e.t < start);
    let hi = events.partition_point(|e| e.t < end);
    events[lo..hi]
        .iter()
        .filter_map(|e| {
            let bearing = table.get(e.u, e.v)?;
            let rotation = pose_at(poses, e.t)?;
            Some(bearing.rotated(&rotation))
        })
        .collect()
}

fn pose_at(poses: &[StampedRotation], t: f64) -> Option<Rotation> {
    let idx = poses.partition_point(|p| p.t <= t);
    poses.get(idx.saturating_sub(1)).map(|p| p.rotation)
}

/// Applies a fixed linear view map to unit points.
pub fn apply_view(points: &[SphericalPoint], view: &Mat3) -> Vec<SphericalPoint> {
    points.iter().filter_map(|p| SphericalPoint::from_vector(&(view * p.vector())).ok()).collect()
}
