//! Global spherical event map: keyframe gating, voxel merge and exact k-NN.

mod kdtree;
mod voxel;

pub use kdtree::{KdTree, Neighbors};
pub use voxel::{voxel_downsample, VoxelKey, MIN_CENTROID_NORM};

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::frontend::EventSphericalFrame;
use crate::geometry::{Rotation, SphericalPoint, StampedRotation, Vec3};
use voxel::{centroid_direction, settle_into};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("map holds {available} points, cannot return {requested} neighbours")]
    TooFewPoints { requested: usize, available: usize },
    #[error("invalid map setting `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("map file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapConfig {
    /// Keyframe rotation threshold in radians.
    pub theta_t: f64,
    /// Voxel edge in the embedding space.
    pub voxel_size: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig { theta_t: 0.0087, voxel_size: 0.004 }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<(), MapError> {
        if !(self.theta_t.is_finite() && self.theta_t > 0.0) {
            return Err(MapError::InvalidConfig { field: "theta_t", reason: "must be positive".into() });
        }
        if !(self.voxel_size > 0.0 && self.voxel_size < 2.0) {
            return Err(MapError::InvalidConfig { field: "voxel_size", reason: "must lie in (0, 2)".into() });
        }
        Ok(())
    }
}

/// True when the current pose has rotated strictly more than `theta_t` away from the last keyframe.
pub fn is_keyframe(current: &Rotation, keyframe: &Rotation, theta_t: f64) -> bool {
    current.angle_to(keyframe) > theta_t
}

#[derive(Debug, Clone)]
pub struct SphericalMap {
    config: MapConfig,
    points: Vec<SphericalPoint>,
    buckets: FxHashMap<VoxelKey, u32>,
    index: KdTree,
    last_keyframe: Option<StampedRotation>,
    dropped: usize,
}

impl SphericalMap {
    pub fn new(config: MapConfig) -> Result<Self, MapError> {
        config.validate()?;
        Ok(SphericalMap {
            config,
            points: Vec::new(),
            buckets: FxHashMap::default(),
            index: KdTree::default(),
            last_keyframe: None,
            dropped: 0,
        })
    }

    /// Builds a map from stored points, merging any that share a voxel.
    pub fn from_points(points: &[SphericalPoint], config: MapConfig) -> Result<Self, MapError> {
        let mut map = Self::new(config)?;
        map.merge(points.iter().copied());
        map.rebuild_index();
        Ok(map)
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn points(&self) -> &[SphericalPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last_keyframe(&self) -> Option<&StampedRotation> {
        self.last_keyframe.as_ref()
    }

    /// Buckets lost to antipodal cancellation so far.
    pub fn dropped_buckets(&self) -> usize {
        self.dropped
    }

    /// Whether a frame at `rotation` should become a keyframe. An empty map always accepts.
    pub fn wants_keyframe(&self, rotation: &Rotation) -> bool {
        match &self.last_keyframe {
            None => true,
            Some(k) => is_keyframe(rotation, &k.rotation, self.config.theta_t),
        }
    }

    /// Rotates the frame into the map, merges it voxel by voxel and rebuilds the index.
    pub fn insert_keyframe(&mut self, frame: &EventSphericalFrame, rotation: &Rotation) {
        self.merge(frame.points.iter().map(|p| p.rotated(rotation)));
        self.rebuild_index();
        self.last_keyframe = Some(StampedRotation::new(frame.t0, *rotation));
    }

    /// Each touched bucket becomes the normalized centroid of its current
    /// point (weight one) and the incoming points. A centroid that the
    /// normalization pushes across a cell wall is pulled back in, so a bucket
    /// never loses its point and never holds two.
    fn merge(&mut self, incoming: impl Iterator<Item = SphericalPoint>) {
        let s = self.config.voxel_size;
        let mut slots: FxHashMap<VoxelKey, usize> = FxHashMap::default();
        let mut groups: Vec<(VoxelKey, Vec3, usize, SphericalPoint)> = Vec::new();
        for p in incoming {
            let key = VoxelKey::of(p.vector(), s);
            match slots.get(&key) {
                Some(&g) => {
                    groups[g].1 += p.vector();
                    groups[g].2 += 1;
                }
                None => {
                    slots.insert(key, groups.len());
                    groups.push((key, *p.vector(), 1, p));
                }
            }
        }
        for (key, mut sum, mut count, first) in groups {
            match self.buckets.get(&key) {
                Some(&slot) => {
                    let old = self.points[slot as usize];
                    sum += old.vector();
                    count += 1;
                    match centroid_direction(&sum, count, &old) {
                        Some(c) => self.points[slot as usize] = settle_into(c, &old, key, s),
                        None => self.dropped += 1,
                    }
                }
                None => match centroid_direction(&sum, count, &first) {
                    Some(c) => {
                        self.buckets.insert(key, self.points.len() as u32);
                        self.points.push(settle_into(c, &first, key, s));
                    }
                    None => self.dropped += 1,
                },
            }
        }
        if self.dropped > 0 {
            log::debug!("{} map buckets dropped to antipodal cancellation", self.dropped);
        }
    }

    fn rebuild_index(&mut self) {
        let coords: Vec<Vec3> = self.points.iter().map(|p| *p.vector()).collect();
        self.index = KdTree::build(&coords);
    }

    /// The `k` map points nearest to `q`, closest first.
    pub fn knn_query(&self, q: &SphericalPoint, k: usize) -> Result<Vec<SphericalPoint>, MapError> {
        let mut out = Neighbors::new(k);
        self.knn_into(q, k, &mut out)?;
        Ok(out.as_slice().iter().map(|&(_, i)| self.points[i as usize]).collect())
    }

    /// Allocation-free variant; neighbour ids index [`SphericalMap::points`].
    pub fn knn_into(&self, q: &SphericalPoint, k: usize, out: &mut Neighbors) -> Result<(), MapError> {
        if self.points.len() < k {
            return Err(MapError::TooFewPoints { requested: k, available: self.points.len() });
        }
        self.index.knn_into(q.vector(), k, out);
        Ok(())
    }

    /// Nearest neighbours no farther than `sqrt(radius_sq)` (chord length); may return fewer than `k`.
    pub fn knn_within(&self, q: &SphericalPoint, k: usize, radius_sq: f64, out: &mut Neighbors) {
        self.index.knn_within(q.vector(), k, radius_sq, out);
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        write_map(path, &self.points)
    }

    pub fn load(path: &Path, config: MapConfig) -> Result<Self, MapError> {
        Self::from_points(&read_map(path)?, config)
    }
}

/// One `x y z` line per point with 17 significant digits.
pub fn format_map(points: &[SphericalPoint]) -> String {
    let mut s = String::with_capacity(points.len() * 72);
    for p in points {
        let v = p.vector();
        let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", v.x, v.y, v.z);
    }
    s
}

pub fn write_map(path: &Path, points: &[SphericalPoint]) -> Result<(), MapError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(format_map(points).as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn parse_map<R: BufRead>(reader: R) -> Result<Vec<SphericalPoint>, MapError> {
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| MapError::Malformed { line: i + 1, reason };
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| malformed(format!("{f:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 3 {
            return Err(malformed(format!("expected 3 fields, found {}", values.len())));
        }
        let v = Vec3::new(values[0], values[1], values[2]);
        points.push(SphericalPoint::new(v).map_err(|e| malformed(e.to_string()))?);
    }
    Ok(points)
}

pub fn read_map(path: &Path) -> Result<Vec<SphericalPoint>, MapError> {
    parse_map(BufReader::new(File::open(path)?))
}
