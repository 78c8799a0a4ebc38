//! Cartesian voxel grid over the embedded unit sphere.

use rustc_hash::FxHashMap;

use crate::geometry::{SphericalPoint, Vec3};

/// Centroids shorter than this are treated as antipodal cancellation.
pub const MIN_CENTROID_NORM: f64 = 1e-6;

/// Integer cell coordinates of a cube of edge `voxel_size` in a grid anchored at `(-1,-1,-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey(pub i32, pub i32, pub i32);

impl VoxelKey {
    #[inline]
    pub fn of(p: &Vec3, voxel_size: f64) -> Self {
        let cell = |x: f64| ((x + 1.0) / voxel_size).floor() as i32;
        VoxelKey(cell(p.x), cell(p.y), cell(p.z))
    }
}

/// Bucket the points and replace each occupied bucket by its re-normalized
/// centroid. Buckets come out in order of first appearance.
///
/// Returns the filtered points and the number of buckets dropped because
/// their centroid collapsed to (near) zero.
pub fn voxel_downsample(points: &[SphericalPoint], voxel_size: f64) -> (Vec<SphericalPoint>, usize) {
    let mut slots: FxHashMap<VoxelKey, usize> = FxHashMap::default();
    let mut sums: Vec<(Vec3, usize, SphericalPoint)> = Vec::new();
    for p in points {
        let key = VoxelKey::of(p.vector(), voxel_size);
        match slots.get(&key) {
            Some(&slot) => {
                let entry = &mut sums[slot];
                entry.0 += p.vector();
                entry.1 += 1;
            }
            None => {
                slots.insert(key, sums.len());
                sums.push((*p.vector(), 1, *p));
            }
        }
    }
    let mut dropped = 0;
    let mut out = Vec::with_capacity(sums.len());
    for (sum, count, first) in sums {
        match centroid_direction(&sum, count, &first) {
            Some(p) => out.push(p),
            None => dropped += 1,
        }
    }
    (out, dropped)
}

/// Normalized mean of a bucket; a lone point is returned untouched.
#[inline]
pub(crate) fn centroid_direction(sum: &Vec3, count: usize, first: &SphericalPoint) -> Option<SphericalPoint> {
    if count == 1 {
        return Some(*first);
    }
    let centroid = sum / count as f64;
    let norm = centroid.norm();
    if norm < MIN_CENTROID_NORM {
        return None;
    }
    Some(SphericalPoint::new_unchecked(centroid / norm))
}

/// Moves `p` along the great circle toward `anchor` (which lies in `key`)
/// until it falls inside `key`. The displacement is bounded by the radial
/// lift of a centroid, i.e. a tiny fraction of the voxel size.
pub(crate) fn settle_into(p: SphericalPoint, anchor: &SphericalPoint, key: VoxelKey, voxel_size: f64) -> SphericalPoint {
    if VoxelKey::of(p.vector(), voxel_size) == key {
        return p;
    }
    let blend = |lambda: f64| {
        let v = p.vector() * (1.0 - lambda) + anchor.vector() * lambda;
        SphericalPoint::new_unchecked(v / v.norm())
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if VoxelKey::of(blend(mid).vector(), voxel_size) == key {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let q = blend(hi);
    if VoxelKey::of(q.vector(), voxel_size) == key {
        q
    } else {
        *anchor
    }
}
