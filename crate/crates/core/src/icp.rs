//! Point-to-line ICP on the unit sphere, solved by Gauss-Newton on SO(3).

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use thiserror::Error;

use crate::frontend::EventSphericalFrame;
use crate::geometry::{hat, Mat3, Rotation, SphericalPoint, Vec3};
use crate::map::{Neighbors, SphericalMap};

/// Points per parallel work item. Partial sums are combined in chunk order,
/// so results do not depend on the number of threads.
const CHUNK: usize = 128;
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum IcpError {
    #[error("no inlier correspondences at iteration {iteration}")]
    AlignmentFailure { iteration: usize },
    #[error("degenerate geometry (condition {condition:.3e}), unconstrained axis {null_direction:?}")]
    DegenerateGeometry { condition: f64, null_direction: [f64; 3] },
    #[error("invalid ICP setting `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub k_neighbors: usize,
    pub max_iterations: usize,
    /// Stop once the update norm falls below this (radians).
    pub convergence_eps: f64,
    /// Largest great-circle angle to the nearest map point for a correspondence to count.
    pub max_corr_dist: f64,
    /// Minimum share of the dominant eigenvalue for a neighbourhood to count as a line.
    pub line_condition_min: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            k_neighbors: 5,
            max_iterations: 20,
            convergence_eps: 1e-6,
            max_corr_dist: 0.02,
            line_condition_min: 0.75,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), IcpError> {
        let bad = |field, reason: &str| Err(IcpError::InvalidConfig { field, reason: reason.into() });
        if self.k_neighbors < 2 {
            return bad("k_neighbors", "must be at least 2");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations", "must be at least 1");
        }
        if !(self.convergence_eps > 0.0) {
            return bad("convergence_eps", "must be positive");
        }
        if !(self.max_corr_dist > 0.0) {
            return bad("max_corr_dist", "must be positive");
        }
        if !(self.line_condition_min > 0.0 && self.line_condition_min <= 1.0) {
            return bad("line_condition_min", "must lie in (0, 1]");
        }
        Ok(())
    }
}

/// A frame point paired with the line `d·τ + c` fitted to its map neighbours.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineCorrespondence {
    pub p: SphericalPoint,
    pub d: Vec3,
    pub c: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    pub rotation: Rotation,
    pub iterations: usize,
    /// Mean squared point-to-line distance over inliers at the returned rotation.
    pub final_cost: f64,
    pub inlier_count: usize,
    pub converged: bool,
}

/// Principal axis and centroid of a neighbourhood, or `None` when it does not look like a line.
pub fn fit_line(neighbors: &[Vec3], line_condition_min: f64) -> Option<(Vec3, Vec3)> {
    if neighbors.len() < 2 {
        return None;
    }
    let n = neighbors.len() as f64;
    let c = neighbors.iter().sum::<Vec3>() / n;
    let cov = neighbors.iter().fold(Mat3::zeros(), |acc, p| {
        let q = p - c;
        acc + q * q.transpose()
    }) / n;
    let trace = cov.trace();
    if !(trace > 1e-30) {
        return None;
    }
    let (lambda, mut d) = principal_axis(&cov);
    if lambda / trace < line_condition_min {
        return None;
    }
    if let Some(lead) = d.iter().find(|x| x.abs() > 1e-12) {
        if *lead < 0.0 {
            d = -d;
        }
    }
    Some((d, c))
}

/// Largest eigenvalue of a symmetric 3×3 matrix and a unit eigenvector for it.
/// Closed form: trigonometric eigenvalues, eigenvector from row cross products.
fn principal_axis(a: &Mat3) -> (f64, Vec3) {
    let q = a.trace() / 3.0;
    let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let diag = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2);
    let p = ((diag + 2.0 * off) / 6.0).sqrt();
    if !(p > 0.0) {
        return (q, Vec3::x());
    }
    let b = (a - Mat3::identity() * q) / p;
    let half_det = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let lambda = q + 2.0 * p * (half_det.acos() / 3.0).cos();
    let m = a - Mat3::identity() * lambda;
    let (r0, r1, r2) = (m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose());
    let best = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)]
        .into_iter()
        .max_by(|u, v| u.norm_squared().total_cmp(&v.norm_squared()))
        .unwrap_or_else(Vec3::zeros);
    let n = best.norm();
    if n > 0.0 {
        (lambda, best / n)
    } else {
        (lambda, Vec3::x())
    }
}

/// `d × (R p − c)`; its norm is the distance from `R p` to the line.
#[inline]
pub fn residual(r: &Rotation, corr: &LineCorrespondence) -> Vec3 {
    corr.d.cross(&(r * corr.p.vector() - corr.c))
}

/// Derivative of [`residual`] under `R ← R·exp(δ)`.
#[inline]
pub fn jacobian(r: &Rotation, corr: &LineCorrespondence) -> Mat3 {
    -hat(&corr.d) * r.matrix() * hat(corr.p.vector())
}

/// Accumulated normal equations.
#[derive(Debug, Clone, Copy)]
struct Normal {
    h: Mat3,
    g: Vec3,
    cost: f64,
    count: usize,
}

impl Normal {
    fn zero() -> Self {
        Normal { h: Mat3::zeros(), g: Vec3::zeros(), cost: 0.0, count: 0 }
    }

    #[inline]
    fn add(&mut self, r: &Rotation, corr: &LineCorrespondence) {
        let res = residual(r, corr);
        let j = jacobian(r, corr);
        self.h += j.transpose() * j;
        self.g -= j.transpose() * res;
        self.cost += res.norm_squared();
        self.count += 1;
    }

    fn merge(mut self, other: &Normal) -> Self {
        self.h += other.h;
        self.g += other.g;
        self.cost += other.cost;
        self.count += other.count;
        self
    }
}

/// Solves `H Δx = g` for the given correspondences linearized at `r`.
pub fn gauss_newton_step(correspondences: &[LineCorrespondence], r: &Rotation) -> Result<Vec3, IcpError> {
    let mut n = Normal::zero();
    for corr in correspondences {
        n.add(r, corr);
    }
    solve_normal(&n.h, &n.g)
}

fn solve_normal(h: &Mat3, g: &Vec3) -> Result<Vec3, IcpError> {
    let eig = SymmetricEigen::new(*h);
    let lo = eig.eigenvalues.imin();
    let hi = eig.eigenvalues.imax();
    let (lmin, lmax) = (eig.eigenvalues[lo], eig.eigenvalues[hi]);
    if !(lmax > 0.0) || !(lmin > 0.0) || lmax / lmin > MAX_CONDITION {
        let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
        let v = eig.eigenvectors.column(lo);
        return Err(IcpError::DegenerateGeometry { condition, null_direction: [v[0], v[1], v[2]] });
    }
    // H = V Λ Vᵀ
    let vt_g = eig.eigenvectors.transpose() * g;
    let scaled = Vec3::new(vt_g[0] / eig.eigenvalues[0], vt_g[1] / eig.eigenvalues[1], vt_g[2] / eig.eigenvalues[2]);
    Ok(eig.eigenvectors * scaled)
}

/// Candidate neighbours of one frame point, remembered between iterations.
///
/// `ids` are the nearest map points to `query`; every other map point is at
/// least `horizon` away from it. After the query moves by `ε`, re-ranking the
/// candidates gives the exact nearest set as long as its farthest member is
/// closer than `horizon − ε`.
#[derive(Debug, Clone, Copy)]
struct Cached {
    query: Vec3,
    horizon: f64,
    ids: [u32; MAX_CANDIDATES],
    len: usize,
    /// Last fitted line and the sorted neighbour ids it came from.
    line: Option<(Vec3, Vec3)>,
    line_ids: [u32; MAX_NEIGHBORS],
}

const MAX_NEIGHBORS: usize = 16;
const MAX_CANDIDATES: usize = 24;
/// Guards the exactness test against rounding in the distance comparisons.
const MARGIN: f64 = 1e-12;

struct Associator<'a> {
    map: &'a SphericalMap,
    k: usize,
    candidates: usize,
    gate_sq: f64,
    line_min: f64,
    reuse: bool,
}

impl Associator<'_> {
    fn lookup(&self, q: &SphericalPoint, nbrs: &mut Neighbors) -> Cached {
        let m = self.candidates;
        // Most queries are settled within twice the gate; anything beyond is farther than every hit.
        let radius = 2.0 * self.gate_sq.sqrt();
        self.map.knn_within(q, m, radius * radius, nbrs);
        let mut horizon = radius;
        let short = nbrs.len() < self.k;
        if short && nbrs.as_slice().first().is_some_and(|&(d, _)| d <= self.gate_sq) {
            self.map.knn_within(q, m, f64::INFINITY, nbrs);
            horizon = f64::INFINITY;
        }
        let found = nbrs.as_slice();
        if found.len() == m {
            horizon = found[m - 1].0.sqrt();
        }
        let mut ids = [0u32; MAX_CANDIDATES];
        for (slot, &(_, id)) in ids.iter_mut().zip(found) {
            *slot = id;
        }
        Cached { query: *q.vector(), horizon, ids, len: found.len(), line: None, line_ids: [u32::MAX; MAX_NEIGHBORS] }
    }

    /// Exact nearest `k` ids (sorted by id) and the nearest squared distance,
    /// from the cache if it provably suffices.
    fn nearest(&self, v: &Vec3, c: &Cached, out: &mut [(f64, u32); MAX_CANDIDATES]) -> Option<usize> {
        let points = self.map.points();
        let moved = (v - c.query).norm();
        let reach = c.horizon - moved - MARGIN;
        for (slot, &id) in out.iter_mut().zip(&c.ids[..c.len]) {
            let m = points[id as usize].vector();
            let (dx, dy, dz) = (m.x - v.x, m.y - v.y, m.z - v.z);
            *slot = (dx * dx + dy * dy + dz * dz, id);
        }
        let ranked = &mut out[..c.len];
        ranked.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n = self.k.min(ranked.len());
        let nearest = ranked.first().map_or(f64::INFINITY, |r| r.0);
        if n == self.k && ranked[n - 1].0.sqrt() < reach {
            return Some(n);
        }
        // Not enough certain neighbours, but certainly nothing inside the gate.
        if nearest > self.gate_sq && self.gate_sq.sqrt() < reach {
            return Some(0);
        }
        None
    }

    /// Correspondence for frame point `p` at rotation `r`, if it passes the gate.
    fn associate(
        &self,
        p: &SphericalPoint,
        r: &Rotation,
        cache: &mut Option<Cached>,
        nbrs: &mut Neighbors,
    ) -> Option<LineCorrespondence> {
        let q = p.rotated(r);
        let v = q.vector();
        let mut ranked = [(0.0, 0u32); MAX_CANDIDATES];
        let cached = match cache {
            Some(c) if self.reuse => self.nearest(v, c, &mut ranked),
            _ => None,
        };
        let count = match cached {
            Some(n) => n,
            None => {
                let fresh = cache.insert(self.lookup(&q, nbrs));
                match self.nearest(v, fresh, &mut ranked) {
                    Some(n) => n,
                    None => {
                        // Ties at the horizon: search exactly and do not reuse.
                        fresh.horizon = f64::NEG_INFINITY;
                        self.map.knn_into(&q, self.k, nbrs).ok()?;
                        for (slot, &item) in ranked.iter_mut().zip(nbrs.as_slice()) {
                            *slot = item;
                        }
                        self.k
                    }
                }
            }
        };
        let c = cache.as_mut()?;
        if count < self.k || ranked[0].0 > self.gate_sq {
            return None;
        }
        let mut ids = [u32::MAX; MAX_NEIGHBORS];
        for (slot, &(_, id)) in ids.iter_mut().zip(&ranked[..count]) {
            *slot = id;
        }
        ids[..count].sort_unstable();
        if ids != c.line_ids {
            let points = self.map.points();
            let mut pts = [Vec3::zeros(); MAX_NEIGHBORS];
            for (slot, &id) in pts.iter_mut().zip(&ids[..count]) {
                *slot = *points[id as usize].vector();
            }
            c.line = fit_line(&pts[..count], self.line_min);
            c.line_ids = ids;
        }
        let (d, c) = c.line?;
        Some(LineCorrespondence { p: *p, d, c })
    }
}

/// Aligns `frame` to `map`, starting from `r_init`.
pub fn align_frame(
    frame: &EventSphericalFrame,
    map: &SphericalMap,
    r_init: &Rotation,
    cfg: &IcpConfig,
) -> Result<IcpResult, IcpError> {
    align(frame, map, r_init, cfg, true)
}

fn align(
    frame: &EventSphericalFrame,
    map: &SphericalMap,
    r_init: &Rotation,
    cfg: &IcpConfig,
    reuse: bool,
) -> Result<IcpResult, IcpError> {
    cfg.validate()?;
    if cfg.k_neighbors > MAX_NEIGHBORS {
        return Err(IcpError::InvalidConfig {
            field: "k_neighbors",
            reason: format!("at most {MAX_NEIGHBORS} supported"),
        });
    }
    let k = cfg.k_neighbors.min(map.len());
    if k < 2 {
        return Err(IcpError::AlignmentFailure { iteration: 1 });
    }
    let chord = 2.0 * (0.5 * cfg.max_corr_dist.min(std::f64::consts::PI)).sin();
    let assoc = Associator {
        map,
        k,
        candidates: (k + 3).min(MAX_CANDIDATES),
        gate_sq: chord * chord,
        line_min: cfg.line_condition_min,
        reuse,
    };

    let mut caches: Vec<Option<Cached>> = vec![None; frame.points.len()];
    let mut r = *r_init;
    let mut converged = false;
    let mut iterations = 0;
    let mut inliers: Vec<LineCorrespondence> = Vec::new();
    for iteration in 1..=cfg.max_iterations {
        iterations = iteration;
        let partials: Vec<(Normal, Vec<LineCorrespondence>)> = frame
            .points
            .par_chunks(CHUNK)
            .zip(caches.par_chunks_mut(CHUNK))
            .map(|(chunk, cache)| {
                let mut nbrs = Neighbors::new(assoc.candidates);
                let mut normal = Normal::zero();
                let mut corrs = Vec::with_capacity(chunk.len());
                for (p, slot) in chunk.iter().zip(cache) {
                    if let Some(corr) = assoc.associate(p, &r, slot, &mut nbrs) {
                        normal.add(&r, &corr);
                        corrs.push(corr);
                    }
                }
                (normal, corrs)
            })
            .collect();
        let total = partials.iter().fold(Normal::zero(), |acc, (n, _)| acc.merge(n));
        if total.count == 0 {
            return Err(IcpError::AlignmentFailure { iteration });
        }
        inliers.clear();
        for (_, corrs) in partials {
            inliers.extend(corrs);
        }
        let dx = solve_normal(&total.h, &total.g)?;
        r = r.retract(&dx);
        if dx.norm() < cfg.convergence_eps {
            converged = true;
            break;
        }
    }
    let final_cost = mean_cost(&inliers, &r);
    Ok(IcpResult { rotation: r, iterations, final_cost, inlier_count: inliers.len(), converged })
}

/// Mean squared residual, summed in the same fixed chunk order as the solver.
fn mean_cost(corrs: &[LineCorrespondence], r: &Rotation) -> f64 {
    if corrs.is_empty() {
        return 0.0;
    }
    let sums: Vec<f64> = corrs
        .par_chunks(CHUNK)
        .map(|c| c.iter().map(|corr| residual(r, corr).norm_squared()).sum())
        .collect();
    sums.iter().sum::<f64>() / corrs.len() as f64
}
