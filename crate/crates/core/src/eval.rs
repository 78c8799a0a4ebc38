//! Absolute and relative rotation error between two trajectories.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use thiserror::Error;

use crate::geometry::{Rotation, StampedRotation};

const QUATERNION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory is empty")]
    Empty,
    #[error("timestamps must increase strictly (pose {index}: {t} after {previous})")]
    NotIncreasing { index: usize, t: f64, previous: f64 },
    #[error("no estimate lies within {max_dt} s of a ground-truth pose")]
    NoPairs { max_dt: f64 },
    #[error("ground truth never accumulates {delta_deg}° of rotation")]
    NoInterval { delta_deg: f64 },
    #[error("trajectory line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Time-ordered rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationTrajectory {
    poses: Vec<StampedRotation>,
}

impl RotationTrajectory {
    pub fn new(poses: Vec<StampedRotation>) -> Result<Self, EvalError> {
        for (i, w) in poses.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(EvalError::NotIncreasing { index: i + 1, t: w[1].t, previous: w[0].t });
            }
        }
        Ok(RotationTrajectory { poses })
    }

    pub fn poses(&self) -> &[StampedRotation] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// A copy with every rotation replaced by `g · R`.
    pub fn pre_rotated(&self, g: &Rotation) -> Self {
        RotationTrajectory {
            poses: self.poses.iter().map(|p| StampedRotation::new(p.t, *g * p.rotation)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        parse_trajectory(BufReader::new(File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = BufWriter::new(File::create(path)?);
        for p in &self.poses {
            writeln!(w, "{}", format_pose(p))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `t qx qy qz qw` with `qw ≥ 0`, all values written to round-trip exactly.
pub fn format_pose(p: &StampedRotation) -> String {
    let q = p.rotation.to_quaternion();
    let mut c = q.coords;
    if c.w < 0.0 {
        c = -c;
    }
    format!("{} {} {} {} {}", p.t, c.x, c.y, c.z, c.w)
}

pub fn parse_trajectory<R: BufRead>(reader: R) -> Result<RotationTrajectory, EvalError> {
    let mut poses = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| EvalError::Malformed { line: i + 1, reason };
        let f: Vec<f64> = text
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| malformed(format!("{s:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if f.len() != 5 {
            return Err(malformed(format!("expected 5 fields, found {}", f.len())));
        }
        let q = Quaternion::new(f[4], f[1], f[2], f[3]);
        if (q.norm() - 1.0).abs() > QUATERNION_TOLERANCE {
            return Err(malformed(format!("quaternion norm {} is not 1", q.norm())));
        }
        poses.push(StampedRotation::new(f[0], Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q))));
    }
    RotationTrajectory::new(poses)
}

/// Estimate/ground-truth pairs with the number of estimates left unmatched.
#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    pub pairs: Vec<(StampedRotation, StampedRotation)>,
    pub dropped: usize,
}

/// Pairs each estimate with the nearest ground-truth pose in time (earlier on ties), within `max_dt`.
pub fn associate(
    est: &RotationTrajectory,
    gt: &RotationTrajectory,
    max_dt: f64,
) -> Result<Association, EvalError> {
    if est.is_empty() || gt.is_empty() {
        return Err(EvalError::Empty);
    }
    let g = gt.poses();
    let mut pairs = Vec::with_capacity(est.len());
    let mut dropped = 0;
    for e in est.poses() {
        let idx = g.partition_point(|p| p.t < e.t);
        let candidates = [idx.checked_sub(1), (idx < g.len()).then_some(idx)];
        let best = candidates
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (g[a].t - e.t).abs().total_cmp(&(g[b].t - e.t).abs()).then(a.cmp(&b)));
        match best {
            Some(j) if (g[j].t - e.t).abs() <= max_dt => pairs.push((*e, g[j])),
            _ => dropped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoPairs { max_dt });
    }
    Ok(Association { pairs, dropped })
}

/// Mean `‖log(R'ᵀ R)‖` in degrees; with `align`, estimates are first
/// pre-multiplied by `R'_0 R_0ᵀ`.
pub fn mean_ape(pairs: &[(StampedRotation, StampedRotation)], align: bool) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let (e0, t0) = (pairs[0].0.rotation.inverse(), pairs[0].1.rotation.inverse());
    let sum: f64 = pairs
        .iter()
        .map(|(e, t)| {
            if align {
                // R'ᵀ (R'_0 R_0ᵀ) R written as a comparison of motions since the first pose.
                (t0 * t.rotation).angle_to(&(e0 * e.rotation))
            } else {
                e.rotation.angle_to(&t.rotation)
            }
        })
        .sum();
    (sum / pairs.len() as f64).to_degrees()
}

/// Start/end pair indices of consecutive, non-overlapping intervals over
/// which the ground truth accumulates `delta_deg` of rotation.
pub fn rpe_intervals(pairs: &[(StampedRotation, StampedRotation)], delta_deg: f64) -> Vec<(usize, usize)> {
    let delta = delta_deg.to_radians();
    // Accumulated small steps fall a few ulps short of an exact multiple.
    let threshold = delta * (1.0 - 1e-9);
    let mut out = Vec::new();
    let mut start = 0;
    let mut acc = 0.0;
    for k in 1..pairs.len() {
        acc += pairs[k - 1].1.rotation.angle_to(&pairs[k].1.rotation);
        if acc >= threshold {
            out.push((start, k));
            start = k;
            acc = 0.0;
        }
    }
    out
}

/// Mean relative rotation error in degrees over ground-truth intervals of `delta_deg`.
pub fn mean_rpe(pairs: &[(StampedRotation, StampedRotation)], delta_deg: f64) -> Result<f64, EvalError> {
    let intervals = rpe_intervals(pairs, delta_deg);
    if intervals.is_empty() {
        return Err(EvalError::NoInterval { delta_deg });
    }
    let sum: f64 = intervals
        .iter()
        .map(|&(a, b)| {
            let rel_est = pairs[a].0.rotation.inverse() * pairs[b].0.rotation;
            let rel_gt = pairs[a].1.rotation.inverse() * pairs[b].1.rotation;
            rel_gt.angle_to(&rel_est)
        })
        .sum();
    Ok((sum / intervals.len() as f64).to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub ape_mean_deg: f64,
    pub rpe_mean_deg: f64,
    pub pairs: usize,
    pub dropped: usize,
    pub alignment: bool,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ape_mean_deg {}", self.ape_mean_deg)?;
        writeln!(f, "rpe_mean_deg {}", self.rpe_mean_deg)?;
        writeln!(f, "pairs {}", self.pairs)?;
        writeln!(f, "dropped {}", self.dropped)?;
        writeln!(f, "alignment {}", if self.alignment { "first_pose" } else { "none" })
    }
}

/// Associates, then computes both metrics.
pub fn evaluate(
    est: &RotationTrajectory,
    gt: &RotationTrajectory,
    max_dt: f64,
    align: bool,
    delta_deg: f64,
) -> Result<EvalReport, EvalError> {
    let assoc = associate(est, gt, max_dt)?;
    Ok(EvalReport {
        ape_mean_deg: mean_ape(&assoc.pairs, align),
        rpe_mean_deg: mean_rpe(&assoc.pairs, delta_deg)?,
        pairs: assoc.pairs.len(),
        dropped: assoc.dropped,
        alignment: align,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn yaw_trajectory(rate_deg: f64, n: usize, dt: f64) -> RotationTrajectory {
        RotationTrajectory::new(
            (0..n)
                .map(|k| {
                    let t = k as f64 * dt;
                    StampedRotation::new(t, Rotation::exp(&Vec3::new(0.0, 0.0, (rate_deg * t).to_radians())))
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> RotationTrajectory {
        let mut r = Rotation::identity();
        let poses = (0..n)
            .map(|k| {
                r = r.retract(&Vec3::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02)));
                StampedRotation::new(k as f64 * 0.01, r)
            })
            .collect();
        RotationTrajectory::new(poses).unwrap()
    }

    #[test]
    fn identical_timestamps_pair_fully() {
        let gt = yaw_trajectory(50.0, 100, 0.001);
        let a = associate(&gt, &gt, 0.0005).unwrap();
        assert_eq!(a.pairs.len(), 100);
        assert_eq!(a.dropped, 0);
    }

    #[test]
    fn gate_rejects_distant_samples() {
        let gt = RotationTrajectory::new(vec![
            StampedRotation::new(0.0, Rotation::identity()),
            StampedRotation::new(1.0, Rotation::identity()),
        ])
        .unwrap();
        let est = RotationTrajectory::new(vec![StampedRotation::new(0.5, Rotation::identity())]).unwrap();
        assert!(matches!(associate(&est, &gt, 0.4), Err(EvalError::NoPairs { .. })));
    }

    #[test]
    fn jittered_association_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = yaw_trajectory(30.0, 500, 0.01);
        let max_dt = 0.004;
        let est = RotationTrajectory::new(
            gt.poses()
                .iter()
                .step_by(2)
                .map(|p| StampedRotation::new(p.t + rng.gen_range(-max_dt..max_dt), p.rotation))
                .collect(),
        )
        .unwrap();
        let a = associate(&est, &gt, max_dt).unwrap();
        assert_eq!(a.pairs.len(), est.len().min(gt.len()));
        for (e, g) in &a.pairs {
            let best = gt.poses().iter().map(|p| (p.t - e.t).abs()).fold(f64::INFINITY, f64::min);
            assert_eq!((g.t - e.t).abs(), best);
        }
    }

    #[test]
    fn ape_zero_and_constant_offset() {
        let gt = yaw_trajectory(40.0, 200, 0.005);
        let a = associate(&gt, &gt, 1e-3).unwrap();
        assert_eq!(mean_ape(&a.pairs, false), 0.0);
        let offset = Rotation::exp(&Vec3::new(0.0, 0.0, 0.001));
        let est = RotationTrajectory::new(
            gt.poses().iter().map(|p| StampedRotation::new(p.t, p.rotation * offset)).collect(),
        )
        .unwrap();
        let a = associate(&est, &gt, 1e-3).unwrap();
        assert!((mean_ape(&a.pairs, false) - 0.001f64.to_degrees()).abs() < 1e-9);
        assert!((mean_ape(&a.pairs, false) - 0.0573).abs() < 5e-5);
    }

    #[test]
    fn alignment_removes_global_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_trajectory(&mut rng, 300);
        let g = Rotation::exp(&Vec3::new(0.7, -1.1, 0.4));
        let est = gt.pre_rotated(&g);
        let a = associate(&est, &gt, 1e-3).unwrap();
        assert!(mean_ape(&a.pairs, true) < 1e-9);
        assert!(mean_ape(&a.pairs, false) > 1.0);
    }

    #[test]
    fn rpe_zero_and_gauge_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_trajectory(&mut rng, 600);
        let a = associate(&gt, &gt, 1e-3).unwrap();
        assert_eq!(mean_rpe(&a.pairs, 10.0).unwrap(), 0.0);
        let est = gt.pre_rotated(&Rotation::exp(&Vec3::new(-0.3, 2.0, 0.1)));
        let a = associate(&est, &gt, 1e-3).unwrap();
        assert!(mean_rpe(&a.pairs, 10.0).unwrap() < 1e-9);
    }

    #[test]
    fn rpe_constant_rate_mismatch() {
        let gt = yaw_trajectory(100.0, 2001, 0.001);
        let est = yaw_trajectory(101.0, 2001, 0.001);
        let a = associate(&est, &gt, 1e-4).unwrap();
        let intervals = rpe_intervals(&a.pairs, 10.0);
        assert_eq!(intervals[0], (0, 100));
        assert!((mean_rpe(&a.pairs, 10.0).unwrap() - 0.1).abs() < 1e-9);
    }

    #[test]
    fn rpe_requires_enough_rotation() {
        let gt = yaw_trajectory(10.0, 100, 0.001);
        let a = associate(&gt, &gt, 1e-4).unwrap();
        assert!(matches!(mean_rpe(&a.pairs, 10.0), Err(EvalError::NoInterval { .. })));
    }

    #[test]
    fn trajectory_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let traj = random_trajectory(&mut rng, 50);
        let text: String = traj.poses().iter().map(|p| format_pose(p) + "\n").collect();
        let back = parse_trajectory(text.as_bytes()).unwrap();
        for (a, b) in traj.poses().iter().zip(back.poses()) {
            assert_eq!(a.t, b.t);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-12);
        }
        for line in text.lines() {
            let qw: f64 = line.split_whitespace().nth(4).unwrap().parse().unwrap();
            assert!(qw >= 0.0);
        }
    }

    #[test]
    fn trajectory_file_rejects_bad_input() {
        assert!(matches!(parse_trajectory("0 0 0 0 2\n".as_bytes()), Err(EvalError::Malformed { line: 1, .. })));
        assert!(matches!(
            parse_trajectory("1 0 0 0 1\n0.5 0 0 0 1\n".as_bytes()),
            Err(EvalError::NotIncreasing { index: 1, .. })
        ));
    }

    #[test]
    fn report_lines() {
        let r = EvalReport { ape_mean_deg: 0.5, rpe_mean_deg: 0.25, pairs: 10, dropped: 1, alignment: true };
        let text = r.to_string();
        assert_eq!(text, "ape_mean_deg 0.5\nrpe_mean_deg 0.25\npairs 10\ndropped 1\nalignment first_pose\n");
    }
}
