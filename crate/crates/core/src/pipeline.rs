//! The tracking and mapping loop, and its configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::eval::{format_pose, RotationTrajectory};
use crate::frontend::{compensate_frame_with_table, estimate_omega, Event, FrameConfig, FrontendError, Segmenter};
use crate::geometry::{BearingTable, CameraModel, GeometryError, Rotation, StampedRotation};
use crate::icp::{align_frame, IcpConfig, IcpError};
use crate::kv::{KvError, KvFile};
use crate::map::{MapConfig, MapError, SphericalMap};
use crate::panorama::PanoramaSpec;
use crate::sim::SimError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid setting `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error(transparent)]
    Config(#[from] KvError),
    #[error(transparent)]
    Camera(#[from] GeometryError),
    #[error(transparent)]
    Events(#[from] FrontendError),
    #[error("{failed} of {frames} frames failed to align")]
    TooManyFailures { failed: usize, frames: usize },
    #[error("the event stream is empty")]
    NoEvents,
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything the frame loop needs besides the camera.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OdometryConfig {
    pub frame: FrameConfig,
    pub icp: IcpConfig,
    pub map: MapConfig,
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.frame.validate().map_err(|e| match e {
            FrontendError::InvalidConfig(reason) => PipelineError::InvalidConfig {
                field: reason.split_whitespace().next().unwrap_or("frame").to_string(),
                reason,
            },
            other => PipelineError::InvalidConfig { field: "frame".into(), reason: other.to_string() },
        })?;
        self.icp.validate().map_err(|e| match e {
            IcpError::InvalidConfig { field, reason } => PipelineError::InvalidConfig { field: field.into(), reason },
            other => PipelineError::InvalidConfig { field: "icp".into(), reason: other.to_string() },
        })?;
        self.map.validate().map_err(|e| match e {
            MapError::InvalidConfig { field, reason } => PipelineError::InvalidConfig { field: field.into(), reason },
            other => PipelineError::InvalidConfig { field: "map".into(), reason: other.to_string() },
        })?;
        Ok(())
    }
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub frequency: Option<f64>,
    pub n: Option<usize>,
    pub theta_t: Option<f64>,
    pub voxel_size: Option<f64>,
    pub k_neighbors: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub camera_path: PathBuf,
    pub odometry: OdometryConfig,
    pub panorama: Option<PanoramaSpec>,
    pub output_dir: Option<PathBuf>,
}

const CONFIG_KEYS: &[&str] = &[
    "camera",
    "frequency",
    "n",
    "min_events",
    "k_neighbors",
    "max_iterations",
    "convergence_eps",
    "max_corr_dist",
    "line_condition_min",
    "theta_t",
    "voxel_size",
    "output",
    "panorama_width",
    "panorama_height",
    "panorama_phi_h",
    "panorama_phi_v",
    "panorama_percentile",
];

impl PipelineConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, PipelineError> {
        let kv = KvFile::read(path)?;
        Self::from_kv(&kv, path.parent().unwrap_or(Path::new(".")), overrides)
    }

    pub fn from_kv(kv: &KvFile, base: &Path, overrides: &Overrides) -> Result<Self, PipelineError> {
        kv.check_keys(CONFIG_KEYS)?;
        let d = OdometryConfig::default();
        let mut odometry = OdometryConfig {
            frame: FrameConfig {
                frequency: kv.get("frequency")?.unwrap_or(d.frame.frequency),
                n: kv.get("n")?.unwrap_or(d.frame.n),
                min_events: kv.get("min_events")?.unwrap_or(d.frame.min_events),
            },
            icp: IcpConfig {
                k_neighbors: kv.get("k_neighbors")?.unwrap_or(d.icp.k_neighbors),
                max_iterations: kv.get("max_iterations")?.unwrap_or(d.icp.max_iterations),
                convergence_eps: kv.get("convergence_eps")?.unwrap_or(d.icp.convergence_eps),
                max_corr_dist: kv.get("max_corr_dist")?.unwrap_or(d.icp.max_corr_dist),
                line_condition_min: kv.get("line_condition_min")?.unwrap_or(d.icp.line_condition_min),
            },
            map: MapConfig {
                theta_t: kv.get("theta_t")?.unwrap_or(d.map.theta_t),
                voxel_size: kv.get("voxel_size")?.unwrap_or(d.map.voxel_size),
            },
        };
        if let Some(v) = overrides.frequency {
            odometry.frame.frequency = v;
        }
        if let Some(v) = overrides.n {
            odometry.frame.n = v;
        }
        if let Some(v) = overrides.theta_t {
            odometry.map.theta_t = v;
        }
        if let Some(v) = overrides.voxel_size {
            odometry.map.voxel_size = v;
        }
        if let Some(v) = overrides.k_neighbors {
            odometry.icp.k_neighbors = v;
        }
        odometry.validate()?;

        let camera: String = kv.require("camera")?;
        let camera_path = base.join(camera);
        if !camera_path.is_file() {
            return Err(PipelineError::InvalidConfig {
                field: "camera".into(),
                reason: format!("{} does not exist", camera_path.display()),
            });
        }
        let panorama = match kv.get::<u32>("panorama_width")? {
            None => None,
            Some(width) => {
                let dflt = PanoramaSpec::default();
                let spec = PanoramaSpec {
                    width,
                    height: kv.get("panorama_height")?.unwrap_or(dflt.height),
                    phi_h: kv.get::<f64>("panorama_phi_h")?.map(f64::to_radians).unwrap_or(dflt.phi_h),
                    phi_v: kv.get::<f64>("panorama_phi_v")?.map(f64::to_radians).unwrap_or(dflt.phi_v),
                    percentile: kv.get("panorama_percentile")?.unwrap_or(dflt.percentile),
                };
                spec.validate().map_err(|e| PipelineError::InvalidConfig {
                    field: "panorama".into(),
                    reason: e.to_string(),
                })?;
                Some(spec)
            }
        };
        let output_dir = kv.get::<String>("output")?.map(|o| base.join(o));
        Ok(PipelineConfig { camera_path, odometry, panorama, output_dir })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStatus {
    /// First frame, inserted into the empty map at the identity.
    Bootstrap,
    Tracked,
    /// Tracked and merged into the map.
    Keyframe,
    /// ICP hit its iteration limit; the pose is still used.
    Unconverged,
    /// Too few events in the window; previous pose repeated.
    Held,
    /// Alignment failed; previous pose repeated.
    Failed,
}

impl FrameStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameStatus::Bootstrap => "bootstrap",
            FrameStatus::Tracked => "tracked",
            FrameStatus::Keyframe => "keyframe",
            FrameStatus::Unconverged => "unconverged",
            FrameStatus::Held => "held",
            FrameStatus::Failed => "failed",
        }
    }
}

/// One pose per segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationEstimate {
    pub t: f64,
    pub rotation: Rotation,
    pub iterations: usize,
    pub cost: f64,
    pub inliers: usize,
    pub status: FrameStatus,
}

impl RotationEstimate {
    fn passive(t: f64, rotation: Rotation, status: FrameStatus) -> Self {
        RotationEstimate { t, rotation, iterations: 0, cost: 0.0, inliers: 0, status }
    }

    pub fn stamped(&self) -> StampedRotation {
        StampedRotation::new(self.t, self.rotation)
    }
}

#[derive(Debug, Clone)]
pub struct OdometryOutput {
    pub estimates: Vec<RotationEstimate>,
    pub map: SphericalMap,
    /// Wall time spent inside the frame loop, excluding the event source.
    pub processing_seconds: f64,
    /// Time between the first and last event.
    pub sequence_seconds: f64,
}

impl OdometryOutput {
    pub fn trajectory(&self) -> RotationTrajectory {
        RotationTrajectory::new(self.estimates.iter().map(RotationEstimate::stamped).collect())
            .expect("segment stamps increase")
    }

    pub fn count(&self, status: FrameStatus) -> usize {
        self.estimates.iter().filter(|e| e.status == status).count()
    }

    pub fn realtime_ratio(&self) -> f64 {
        if self.sequence_seconds > 0.0 {
            self.processing_seconds / self.sequence_seconds
        } else {
            0.0
        }
    }

    /// `t qx qy qz qw` per segment.
    pub fn trajectory_text(&self) -> String {
        let mut s = String::with_capacity(self.estimates.len() * 80);
        for e in &self.estimates {
            s.push_str(&format_pose(&e.stamped()));
            s.push('\n');
        }
        s
    }

    /// `t iterations cost inliers status` per segment, then summary comments.
    pub fn diagnostics_text(&self) -> String {
        let mut s = String::with_capacity(self.estimates.len() * 48);
        for e in &self.estimates {
            let _ = writeln!(s, "{} {} {:.6e} {} {}", e.t, e.iterations, e.cost, e.inliers, e.status.as_str());
        }
        let _ = writeln!(s, "# frames {}", self.estimates.len());
        for status in [FrameStatus::Keyframe, FrameStatus::Unconverged, FrameStatus::Held, FrameStatus::Failed] {
            let _ = writeln!(s, "# {} {}", status.as_str(), self.count(status));
        }
        let _ = writeln!(s, "# map_points {}", self.map.len());
        let _ = writeln!(s, "# processing_seconds {:.3}", self.processing_seconds);
        let _ = writeln!(s, "# sequence_seconds {:.6}", self.sequence_seconds);
        let _ = writeln!(s, "# realtime_ratio {:.3}", self.realtime_ratio());
        s
    }
}

/// Runs tracking and mapping over a time-ordered event stream.
pub fn run_odometry<I, E>(config: &OdometryConfig, camera: &CameraModel, events: I) -> Result<OdometryOutput, PipelineError>
where
    I: IntoIterator<Item = Result<Event, E>>,
    PipelineError: From<E>,
{
    config.validate()?;
    let table = BearingTable::new(camera)?;
    let mut map = SphericalMap::new(config.map)?;
    let mut estimates: Vec<RotationEstimate> = Vec::new();
    // The last two successfully aligned poses, for the velocity model.
    let mut history: Vec<StampedRotation> = Vec::with_capacity(3);
    let mut current = Rotation::identity();
    let mut processing = 0.0;
    let mut first_event: Option<f64> = None;
    let mut last_event = 0.0;
    let mut frames = 0;
    let mut failed = 0;

    for segment in Segmenter::new(events.into_iter(), config.frame) {
        let segment = segment?;
        if let Some(last) = segment.events.last() {
            first_event.get_or_insert(segment.events[0].t);
            last_event = last.t;
        }
        let started = Instant::now();
        if segment.skipped {
            estimates.push(RotationEstimate::passive(segment.start, current, FrameStatus::Held));
            processing += started.elapsed().as_secs_f64();
            continue;
        }
        frames += 1;
        let omega = estimate_omega(&history)?;
        let frame = compensate_frame_with_table(&segment.events, &omega, &table)?;
        if map.is_empty() && history.is_empty() {
            map.insert_keyframe(&frame, &Rotation::identity());
            current = Rotation::identity();
            estimates.push(RotationEstimate::passive(frame.t0, current, FrameStatus::Bootstrap));
        } else {
            let init = match history.last() {
                Some(last) => last.rotation.retract(&(omega * (frame.t0 - last.t))),
                None => current,
            };
            match align_frame(&frame, &map, &init, &config.icp) {
                Ok(res) => {
                    current = res.rotation;
                    let status = if map.wants_keyframe(&current) {
                        map.insert_keyframe(&frame, &current);
                        FrameStatus::Keyframe
                    } else if res.converged {
                        FrameStatus::Tracked
                    } else {
                        FrameStatus::Unconverged
                    };
                    estimates.push(RotationEstimate {
                        t: frame.t0,
                        rotation: current,
                        iterations: res.iterations,
                        cost: res.final_cost,
                        inliers: res.inlier_count,
                        status,
                    });
                }
                Err(err) => {
                    log::debug!("frame at {:.6} s failed: {err}", frame.t0);
                    failed += 1;
                    estimates.push(RotationEstimate::passive(frame.t0, current, FrameStatus::Failed));
                    processing += started.elapsed().as_secs_f64();
                    continue;
                }
            }
        }
        history.push(StampedRotation::new(frame.t0, current));
        if history.len() > 2 {
            history.remove(0);
        }
        processing += started.elapsed().as_secs_f64();
    }

    let Some(first) = first_event else {
        return Err(PipelineError::NoEvents);
    };
    if frames > 0 && 2 * failed >= frames {
        return Err(PipelineError::TooManyFailures { failed, frames });
    }
    Ok(OdometryOutput {
        estimates,
        map,
        processing_seconds: processing,
        sequence_seconds: last_event - first,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::Polarity;
    use crate::map::voxel_downsample;

    fn camera() -> CameraModel {
        CameraModel::pinhole(200.0, 200.0, 120.0, 90.0, 240, 180)
    }

    #[test]
    fn single_frame_bootstraps_map() {
        let events: Vec<Event> = (0..200)
            .map(|i| Event::new(1.0 + i as f64 * 1e-6, (i % 240) as u16, (i / 3 % 180) as u16, Polarity::Positive))
            .collect();
        let cfg = OdometryConfig::default();
        let out = run_odometry(&cfg, &camera(), events.iter().copied().map(Ok::<_, FrontendError>)).unwrap();
        assert_eq!(out.estimates.len(), 1);
        assert_eq!(out.estimates[0].rotation, Rotation::identity());
        assert_eq!(out.estimates[0].status, FrameStatus::Bootstrap);
        let frame = compensate_frame_with_table(&events, &crate::geometry::Vec3::zeros(), &BearingTable::new(&camera()).unwrap()).unwrap();
        let (expected, _) = voxel_downsample(&frame.points, cfg.map.voxel_size);
        assert_eq!(out.map.len(), expected.len());
    }

    #[test]
    fn stream_errors_propagate() {
        let events = vec![
            Ok(Event::new(0.0, 1, 1, Polarity::Positive)),
            Err(FrontendError::EmptySegment),
        ];
        let err = run_odometry(&OdometryConfig::default(), &camera(), events).unwrap_err();
        assert!(matches!(err, PipelineError::Events(FrontendError::EmptySegment)));
    }

    #[test]
    fn empty_stream_is_an_error() {
        let events: Vec<Result<Event, FrontendError>> = Vec::new();
        assert!(matches!(run_odometry(&OdometryConfig::default(), &camera(), events), Err(PipelineError::NoEvents)));
    }

    #[test]
    fn config_names_bad_field() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cam.txt"), camera().to_kv_string()).unwrap();
        let kv = KvFile::parse("camera cam.txt\ntheta_t -0.1\n").unwrap();
        let err = PipelineConfig::from_kv(&kv, dir.path(), &Overrides::default()).unwrap_err();
        assert!(matches!(&err, PipelineError::InvalidConfig { field, .. } if field == "theta_t"), "{err}");
        let kv = KvFile::parse("camera cam.txt\nfrequency 0\n").unwrap();
        let err = PipelineConfig::from_kv(&kv, dir.path(), &Overrides::default()).unwrap_err();
        assert!(matches!(&err, PipelineError::InvalidConfig { field, .. } if field == "frequency"), "{err}");
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cam.txt"), camera().to_kv_string()).unwrap();
        let kv = KvFile::parse("camera cam.txt\nfrequency 500\nk_neighbors 4\n").unwrap();
        let o = Overrides { frequency: Some(200.0), ..Default::default() };
        let cfg = PipelineConfig::from_kv(&kv, dir.path(), &o).unwrap();
        assert_eq!(cfg.odometry.frame.frequency, 200.0);
        assert_eq!(cfg.odometry.icp.k_neighbors, 4);
        assert!(cfg.panorama.is_none());
    }

    #[test]
    fn missing_camera_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let kv = KvFile::parse("camera nowhere.txt\n").unwrap();
        let err = PipelineConfig::from_kv(&kv, dir.path(), &Overrides::default()).unwrap_err();
        assert!(matches!(&err, PipelineError::InvalidConfig { field, .. } if field == "camera"));
    }
}
