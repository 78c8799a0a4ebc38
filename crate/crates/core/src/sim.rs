//! Rotation-only event simulator with exact ground truth.
//!
//! Each landmark is a fixed world direction. On a fine time grid its
//! projection is tracked and an event fires whenever it has moved at least
//! `pixel_threshold` pixels since the landmark's previous event. Landmarks
//! are skipped ahead using a bound on how fast any projection can move, so
//! cost scales with the number of events rather than landmarks × steps.

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::eval::RotationTrajectory;
use crate::frontend::{Event, Polarity};
use crate::geometry::{right_jacobian, CameraModel, Distortion, Mat3, Rotation, SphericalPoint, StampedRotation, Vec2, Vec3};

/// Default simulation step: 10 µs.
pub const DEFAULT_STEP_NS: u64 = 10_000;
const CHUNK_STEPS: u64 = 2_000;
const LANDMARK_BATCH: usize = 512;
/// Extra angle around the sensor inside which the pixel-speed bound holds.
const FIELD_MARGIN: f64 = 0.14;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("time {t} s outside the profile range [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
    #[error("invalid simulation setting `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("the scene never produced an event")]
    NoEvents,
}

/// A spherical cap around `axis` with half-angle `half_angle`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereCap {
    pub axis: Vec3,
    pub half_angle: f64,
}

impl SphereCap {
    pub fn new(axis: Vec3, half_angle: f64) -> Self {
        SphereCap { axis: axis.normalize(), half_angle: half_angle.clamp(1e-6, PI) }
    }

    pub fn contains(&self, v: &Vec3) -> bool {
        self.axis.dot(v) >= self.half_angle.cos()
    }

    /// Orthonormal basis `(e1, e2, axis)`.
    fn basis(&self) -> (Vec3, Vec3) {
        let helper = if self.axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = self.axis.cross(&helper).normalize();
        (e1, self.axis.cross(&e1))
    }

    /// Area-uniform sample.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        let (e1, e2) = self.basis();
        let z: f64 = rng.gen_range(self.half_angle.cos()..=1.0);
        let phi: f64 = rng.gen_range(0.0..TAU);
        let s = (1.0 - z * z).max(0.0).sqrt();
        (e1 * (s * phi.cos()) + e2 * (s * phi.sin()) + self.axis * z).normalize()
    }
}

/// World-frame landmark directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub landmarks: Vec<SphericalPoint>,
    pub seed: u64,
}

impl Scene {
    /// `count` independent directions, uniform on the cap.
    pub fn uniform_cap(seed: u64, count: usize, cap: &SphereCap) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let landmarks = (0..count).map(|_| SphericalPoint::new_unchecked(cap.sample(&mut rng))).collect();
        Scene { landmarks, seed }
    }

    /// About `count` directions laid out along random great-circle arcs
    /// whose midpoints are uniform on the cap, like the edges of a textured
    /// environment.
    pub fn edges(seed: u64, count: usize, cap: &SphereCap, spacing: f64, arc_length: (f64, f64)) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut landmarks = Vec::with_capacity(count + 256);
        while landmarks.len() < count {
            let centre = cap.sample(&mut rng);
            let mut tangent;
            loop {
                tangent = centre.cross(&cap.sample(&mut rng));
                if tangent.norm() > 1e-3 {
                    break;
                }
            }
            let axis = tangent.normalize();
            let length = rng.gen_range(arc_length.0..=arc_length.1);
            let half = (0.5 * length / spacing) as i64;
            for s in -half..=half {
                let p = Rotation::exp(&(axis * (s as f64 * spacing))) * centre;
                landmarks.push(SphericalPoint::new_unchecked(p.normalize()));
            }
        }
        // Arc order would make simultaneous events spatially clustered.
        landmarks.shuffle(&mut rng);
        Scene { landmarks, seed }
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }
}

/// Directions uniform on a cap; the scene used for distribution checks.
pub fn generate_scene(seed: u64, count: usize, cap: &SphereCap) -> Scene {
    Scene::uniform_cap(seed, count, cap)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisWave {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionKind {
    /// `θ(t) = ω t`.
    ConstantRate { omega: Vec3 },
    /// `θ_i(t) = a_i sin(2π f_i t + φ_i)` per axis.
    Sinusoidal { axes: [AxisWave; 3] },
}

/// Closed-form camera-to-world rotation `R(t) = exp(θ(t))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionProfile {
    pub kind: MotionKind,
    pub duration: f64,
}

impl MotionProfile {
    pub fn constant_rate(omega: Vec3, duration: f64) -> Self {
        MotionProfile { kind: MotionKind::ConstantRate { omega }, duration }
    }

    pub fn sinusoidal(axes: [AxisWave; 3], duration: f64) -> Self {
        MotionProfile { kind: MotionKind::Sinusoidal { axes }, duration }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimError::InvalidConfig { field: "duration", reason: "must be positive".into() });
        }
        let finite = match &self.kind {
            MotionKind::ConstantRate { omega } => omega.iter().all(|x| x.is_finite()),
            MotionKind::Sinusoidal { axes } => {
                axes.iter().all(|a| a.amplitude.is_finite() && a.frequency.is_finite() && a.phase.is_finite())
            }
        };
        if !finite {
            return Err(SimError::InvalidConfig { field: "amplitude", reason: "must be finite".into() });
        }
        Ok(())
    }

    fn theta(&self, t: f64) -> Vec3 {
        match &self.kind {
            MotionKind::ConstantRate { omega } => omega * t,
            MotionKind::Sinusoidal { axes } => {
                Vec3::from_fn(|i, _| axes[i].amplitude * (TAU * axes[i].frequency * t + axes[i].phase).sin())
            }
        }
    }

    fn theta_dot(&self, t: f64) -> Vec3 {
        match &self.kind {
            MotionKind::ConstantRate { omega } => *omega,
            MotionKind::Sinusoidal { axes } => Vec3::from_fn(|i, _| {
                let w = TAU * axes[i].frequency;
                axes[i].amplitude * w * (w * t + axes[i].phase).cos()
            }),
        }
    }

    pub fn trajectory_at(&self, t: f64) -> Result<Rotation, SimError> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(SimError::OutOfRange { t, duration: self.duration });
        }
        Ok(self.rotation(t))
    }

    #[inline]
    fn rotation(&self, t: f64) -> Rotation {
        Rotation::exp(&self.theta(t))
    }

    /// Body angular velocity, `R(t)ᵀ Ṙ(t) = hat(ω)`.
    pub fn body_rate(&self, t: f64) -> Vec3 {
        right_jacobian(&self.theta(t)) * self.theta_dot(t)
    }

    /// Upper bound on `‖ω‖` over the whole profile. The right Jacobian has
    /// unit operator norm, so `‖θ̇‖` bounds the body rate.
    pub fn rate_bound(&self) -> f64 {
        match &self.kind {
            MotionKind::ConstantRate { omega } => omega.norm(),
            MotionKind::Sinusoidal { axes } => {
                axes.iter().map(|a| (a.amplitude * TAU * a.frequency).powi(2)).sum::<f64>().sqrt()
            }
        }
    }

    /// Mean `‖ω‖` estimated on a uniform grid.
    pub fn mean_rate(&self, samples: usize) -> f64 {
        let n = samples.max(1);
        (0..n).map(|i| self.body_rate((i as f64 + 0.5) / n as f64 * self.duration).norm()).sum::<f64>() / n as f64
    }

    /// Largest rotation angle away from the identity, estimated on a grid.
    pub fn max_angle(&self, samples: usize) -> f64 {
        let n = samples.max(1);
        (0..=n).map(|i| self.theta(i as f64 / n as f64 * self.duration).norm()).fold(0.0, f64::max)
    }

    /// Ground truth on the grid `k · step_ns`.
    pub fn sample(&self, step_ns: u64) -> RotationTrajectory {
        let steps = step_count(self.duration, step_ns);
        let poses = (0..=steps).map(|k| {
            let t = step_time(k, step_ns);
            StampedRotation::new(t, self.rotation(t))
        });
        RotationTrajectory::new(poses.collect()).expect("grid times increase")
    }
}

#[inline]
pub fn step_time(k: u64, step_ns: u64) -> f64 {
    (k * step_ns) as f64 / 1e9
}

fn step_count(duration: f64, step_ns: u64) -> u64 {
    (duration * 1e9 / step_ns as f64 + 1e-9).floor() as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub pixel_threshold: f64,
    pub step_ns: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { pixel_threshold: 1.0, step_ns: DEFAULT_STEP_NS }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.pixel_threshold > 0.0 && self.pixel_threshold.is_finite()) {
            return Err(SimError::InvalidConfig { field: "pixel_threshold", reason: "must be positive".into() });
        }
        if self.step_ns == 0 {
            return Err(SimError::InvalidConfig { field: "step", reason: "must be positive".into() });
        }
        Ok(())
    }
}

/// The camera used by the presets: 240×180 with mild distortion.
pub fn default_sim_camera() -> CameraModel {
    CameraModel::new(
        199.5,
        200.5,
        119.7,
        89.6,
        Distortion { k1: -0.03, k2: 0.004, p1: 2e-4, p2: -1e-4, k3: 0.0 },
        240,
        180,
    )
    .expect("valid preset camera")
}

/// An event tagged with the landmark that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelledEvent {
    pub event: Event,
    pub landmark: u32,
}

#[derive(Debug, Clone, Copy)]
struct LandmarkState {
    next_step: u64,
    reference: Option<Vec2>,
    /// Offset of the first reference from the first observation, in thresholds.
    phase: Vec2,
    positive: bool,
}

/// Each landmark starts with a reference displaced uniformly within one
/// threshold of its first observation, so landmarks do not all fire in step.
fn initial_states(scene: &Scene) -> Vec<LandmarkState> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..scene.len())
        .map(|_| {
            let r = rng.gen::<f64>().sqrt();
            let a = rng.gen_range(0.0..TAU);
            LandmarkState { next_step: 0, reference: None, phase: Vec2::new(r * a.cos(), r * a.sin()), positive: true }
        })
        .collect()
}

/// Largest operator norm of the distortion Jacobian on `|n| ≤ radius`, with a safety factor.
fn distortion_gain(d: &Distortion, radius: f64) -> f64 {
    if d.is_zero() {
        return 1.0;
    }
    let h = 1e-6;
    let mut best: f64 = 1.0;
    for i in 0..=48 {
        let r = radius * i as f64 / 48.0;
        for j in 0..96 {
            let a = TAU * j as f64 / 96.0;
            let n = Vec2::new(r * a.cos(), r * a.sin());
            let dx = (d.apply(&(n + Vec2::new(h, 0.0))) - d.apply(&(n - Vec2::new(h, 0.0)))) / (2.0 * h);
            let dy = (d.apply(&(n + Vec2::new(0.0, h))) - d.apply(&(n - Vec2::new(0.0, h)))) / (2.0 * h);
            let j = nalgebra::Matrix2::from_columns(&[dx, dy]);
            best = best.max(j.norm());
        }
    }
    1.1 * best
}

/// Streams simulated events in time order, one chunk of grid steps at a time.
pub struct EventSimulator {
    landmarks: Vec<Vec3>,
    profile: MotionProfile,
    camera: CameraModel,
    config: SimConfig,
    states: Vec<LandmarkState>,
    /// Cosine of the sensor's largest off-axis angle.
    cos_field: f64,
    field: f64,
    field_ext: f64,
    /// Pixels per radian of direction change, valid inside `field_ext`.
    pixel_gain: f64,
    focal_gain: f64,
    total_steps: u64,
    chunk_start: u64,
    buffer: std::vec::IntoIter<LabelledEvent>,
    emitted: u64,
    finished: bool,
}

impl EventSimulator {
    pub fn new(scene: &Scene, profile: MotionProfile, camera: CameraModel, config: SimConfig) -> Result<Self, SimError> {
        profile.validate()?;
        config.validate()?;
        camera.validate().map_err(|e| SimError::InvalidConfig { field: "camera", reason: e.to_string() })?;
        let field = camera
            .max_off_axis_angle()
            .map_err(|e| SimError::InvalidConfig { field: "camera", reason: e.to_string() })?;
        let field_ext = (field + FIELD_MARGIN).min(0.5 * PI - 0.05);
        let gain = distortion_gain(&camera.distortion, field_ext.tan());
        let focal_gain = camera.fx.max(camera.fy) * gain;
        let pixel_gain = focal_gain / field_ext.cos().powi(2);
        Ok(EventSimulator {
            landmarks: scene.landmarks.iter().map(|p| *p.vector()).collect(),
            profile,
            camera,
            config,
            states: initial_states(scene),
            cos_field: field.cos(),
            field,
            field_ext,
            pixel_gain,
            focal_gain,
            total_steps: step_count(profile.duration, config.step_ns),
            chunk_start: 0,
            buffer: Vec::new().into_iter(),
            emitted: 0,
            finished: false,
        })
    }

    /// Ground truth at the simulation grid.
    pub fn ground_truth(&self) -> RotationTrajectory {
        self.profile.sample(self.config.step_ns)
    }

    pub fn events_emitted(&self) -> u64 {
        self.emitted
    }

    fn fill(&mut self) -> bool {
        while self.chunk_start <= self.total_steps {
            let k0 = self.chunk_start;
            let k1 = (k0 + CHUNK_STEPS).min(self.total_steps + 1);
            self.chunk_start = k1;
            let events = self.run_chunk(k0, k1);
            if !events.is_empty() {
                self.emitted += events.len() as u64;
                self.buffer = events.into_iter();
                return true;
            }
        }
        false
    }

    fn run_chunk(&mut self, k0: u64, k1: u64) -> Vec<LabelledEvent> {
        let step_ns = self.config.step_ns;
        let step = step_ns as f64 / 1e9;
        let world_to_camera: Vec<Mat3> =
            (k0..k1).map(|k| self.profile.rotation(step_time(k, step_ns)).matrix().transpose()).collect();
        // Rate bound for this chunk only; every skip below is capped at the chunk end.
        let rate = (k0..k1)
            .map(|k| self.profile.body_rate(step_time(k, step_ns)).norm())
            .fold(0.0, f64::max);
        let rate = rate * 1.01 + 1e-3 + self.profile.rate_bound() * 1e-4;

        let ctx = ChunkContext {
            k0,
            k1,
            step,
            step_ns,
            rate,
            rotations: &world_to_camera,
            camera: &self.camera,
            threshold: self.config.pixel_threshold,
            cos_field: self.cos_field,
            field: self.field,
            field_ext: self.field_ext,
            pixel_gain: self.pixel_gain,
            focal_gain: self.focal_gain,
        };
        let landmarks = &self.landmarks;
        let mut events: Vec<LabelledEvent> = self
            .states
            .par_chunks_mut(LANDMARK_BATCH)
            .enumerate()
            .flat_map_iter(|(batch, states)| {
                let mut out = Vec::new();
                for (i, state) in states.iter_mut().enumerate() {
                    let id = batch * LANDMARK_BATCH + i;
                    ctx.advance(id as u32, &landmarks[id], state, &mut out);
                }
                out
            })
            .collect();
        events.sort_unstable_by(|a, b| a.event.t.total_cmp(&b.event.t).then(a.landmark.cmp(&b.landmark)));
        events
    }
}

struct ChunkContext<'a> {
    k0: u64,
    k1: u64,
    step: f64,
    step_ns: u64,
    rate: f64,
    rotations: &'a [Mat3],
    camera: &'a CameraModel,
    threshold: f64,
    cos_field: f64,
    field: f64,
    field_ext: f64,
    pixel_gain: f64,
    /// Pixels per radian on the optical axis; off axis it grows as `1/cos²`.
    focal_gain: f64,
}

impl ChunkContext<'_> {
    /// Steps before an on-sensor projection at `cos_angle` off axis can move `pixels`.
    /// The direction turns by at most `pixels / focal_gain` in that time.
    #[inline]
    fn steps_for_pixels(&self, cos_angle: f64, pixels: f64) -> u64 {
        let reach = cos_angle.clamp(-1.0, 1.0).acos() + pixels / self.focal_gain;
        if reach > self.field_ext {
            return self.steps_for_angle(pixels / self.pixel_gain);
        }
        self.steps_for_angle(pixels * reach.cos().powi(2) / self.focal_gain)
    }

    /// Steps that certainly pass before the direction can turn by `angle`.
    #[inline]
    fn steps_for_angle(&self, angle: f64) -> u64 {
        if self.rate <= 0.0 {
            return u64::MAX;
        }
        ((angle / self.rate / self.step).floor() as u64).max(1)
    }

    fn advance(&self, id: u32, landmark: &Vec3, state: &mut LandmarkState, out: &mut Vec<LabelledEvent>) {
        let (w, h) = (self.camera.width as f64, self.camera.height as f64);
        let mut k = state.next_step.max(self.k0);
        while k < self.k1 {
            let c = self.rotations[(k - self.k0) as usize] * landmark;
            let skip;
            if c.z < self.cos_field {
                let angle = c.z.clamp(-1.0, 1.0).acos();
                skip = self.steps_for_angle(angle - self.field);
            } else {
                let px = self.camera.project(&c).expect("in front of the camera");
                let (u, v) = (px.x.round(), px.y.round());
                if u < 0.0 || v < 0.0 || u >= w || v >= h {
                    let dx = (-0.5 - px.x).max(px.x - (w - 0.5)).max(0.0);
                    let dy = (-0.5 - px.y).max(px.y - (h - 0.5)).max(0.0);
                    let angle = c.z.clamp(-1.0, 1.0).acos();
                    let turn = (dx.hypot(dy) / self.pixel_gain).min(self.field_ext - angle);
                    skip = self.steps_for_angle(turn);
                } else {
                    match state.reference {
                        None => {
                            state.reference = Some(px + state.phase * self.threshold);
                            skip = self.steps_for_pixels(c.z, self.threshold * (1.0 - state.phase.norm()));
                        }
                        Some(r) => {
                            let moved = (px - r).norm();
                            if moved >= self.threshold {
                                let polarity = if state.positive { Polarity::Positive } else { Polarity::Negative };
                                state.positive = !state.positive;
                                state.reference = Some(px);
                                let t = step_time(k, self.step_ns);
                                out.push(LabelledEvent { event: Event::new(t, u as u16, v as u16, polarity), landmark: id });
                                skip = self.steps_for_pixels(c.z, self.threshold);
                            } else {
                                skip = self.steps_for_pixels(c.z, self.threshold - moved);
                            }
                        }
                    }
                }
            }
            k = k.saturating_add(skip);
        }
        // The rate bound only holds inside this chunk.
        state.next_step = k.min(self.k1);
    }
}

/// Labelled events, for tests that need to know which landmark fired.
pub struct LabelledStream(EventSimulator);

impl Iterator for LabelledStream {
    type Item = Result<LabelledEvent, SimError>;

    fn next(&mut self) -> Option<Self::Item> {
        let sim = &mut self.0;
        if sim.finished {
            return None;
        }
        if let Some(e) = sim.buffer.next() {
            return Some(Ok(e));
        }
        if sim.fill() {
            return sim.buffer.next().map(Ok);
        }
        sim.finished = true;
        if sim.emitted == 0 {
            Some(Err(SimError::NoEvents))
        } else {
            None
        }
    }
}

impl EventSimulator {
    pub fn labelled(self) -> LabelledStream {
        LabelledStream(self)
    }

    /// Plain event stream; yields `Err(NoEvents)` at the end if nothing fired.
    pub fn events(self) -> impl Iterator<Item = Result<Event, SimError>> {
        self.labelled().map(|r| r.map(|l| l.event))
    }
}

/// Collects the whole stream with its ground truth.
pub fn simulate_events(
    scene: &Scene,
    profile: MotionProfile,
    camera: CameraModel,
    config: SimConfig,
) -> Result<(Vec<Event>, RotationTrajectory), SimError> {
    let sim = EventSimulator::new(scene, profile, camera, config)?;
    let gt = sim.ground_truth();
    let events = sim.events().collect::<Result<Vec<_>, _>>()?;
    Ok((events, gt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetKind {
    /// Short, fast multi-axis oscillation.
    Dm,
    /// Long oscillation at a moderate rate.
    Ld,
}

/// A complete simulated sequence: scene, motion and camera.
#[derive(Debug, Clone)]
pub struct Preset {
    pub kind: PresetKind,
    pub scene: Scene,
    pub profile: MotionProfile,
    pub camera: CameraModel,
    pub config: SimConfig,
}

const DM_MEAN_RATE_DEG: f64 = 120.0;
const LD_MEAN_RATE_DEG: f64 = 107.0;

/// Waves with a dominant yaw (about the camera's vertical axis).
fn base_waves(kind: PresetKind) -> [AxisWave; 3] {
    let deg = |x: f64| x.to_radians();
    match kind {
        PresetKind::Dm => [
            AxisWave { amplitude: deg(18.0), frequency: 0.37, phase: 0.0 },
            AxisWave { amplitude: deg(55.0), frequency: 0.50, phase: 0.0 },
            AxisWave { amplitude: deg(12.0), frequency: 0.29, phase: 0.0 },
        ],
        PresetKind::Ld => [
            AxisWave { amplitude: deg(15.0), frequency: 0.23, phase: 0.0 },
            AxisWave { amplitude: deg(60.0), frequency: 0.41, phase: 0.0 },
            AxisWave { amplitude: deg(10.0), frequency: 0.17, phase: 0.0 },
        ],
    }
}

/// Scales all frequencies so the mean body rate over `duration` equals `target` rad/s.
fn fit_frequencies(waves: [AxisWave; 3], duration: f64, target: f64) -> MotionProfile {
    let mut scale = 1.0;
    let mut profile = MotionProfile::sinusoidal(waves, duration);
    for _ in 0..30 {
        let mut scaled = waves;
        for w in &mut scaled {
            w.frequency *= scale;
        }
        profile = MotionProfile::sinusoidal(scaled, duration);
        let mean = profile.mean_rate(20_000);
        if mean <= 0.0 {
            break;
        }
        let ratio = target / mean;
        scale *= ratio;
        if (ratio - 1.0).abs() < 1e-9 {
            break;
        }
    }
    profile
}

impl Preset {
    /// Multi-axis oscillation averaging `120°/s × rate_scale`.
    pub fn dm(rate_scale: f64, duration: f64) -> Result<Preset, SimError> {
        Self::build(PresetKind::Dm, DM_MEAN_RATE_DEG * rate_scale, duration, 48_000, 7)
    }

    /// Slower oscillation averaging about 107°/s, meant for long runs.
    pub fn ld(duration: f64) -> Result<Preset, SimError> {
        Self::build(PresetKind::Ld, LD_MEAN_RATE_DEG, duration, 12_000, 11)
    }

    fn build(kind: PresetKind, mean_rate_deg: f64, duration: f64, landmarks: usize, seed: u64) -> Result<Preset, SimError> {
        if !(mean_rate_deg > 0.0 && mean_rate_deg.is_finite()) {
            return Err(SimError::InvalidConfig { field: "rate_scale", reason: "must be positive".into() });
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(SimError::InvalidConfig { field: "duration", reason: "must be positive".into() });
        }
        let camera = default_sim_camera();
        let profile = fit_frequencies(base_waves(kind), duration, mean_rate_deg.to_radians());
        let field = camera.max_off_axis_angle().expect("preset camera projects its corners");
        let cap = SphereCap::new(Vec3::z(), profile.max_angle(20_000) + field + 0.1);
        let scene = Scene::edges(seed, landmarks, &cap, 0.0025, (0.05, 0.25));
        Ok(Preset { kind, scene, profile, camera, config: SimConfig::default() })
    }

    pub fn simulator(&self) -> Result<EventSimulator, SimError> {
        EventSimulator::new(&self.scene, self.profile, self.camera.clone(), self.config)
    }

    /// Ground truth at arbitrary times inside the profile.
    pub fn ground_truth_at(&self, times: &[f64]) -> Result<RotationTrajectory, SimError> {
        let poses = times
            .iter()
            .map(|&t| self.profile.trajectory_at(t).map(|r| StampedRotation::new(t, r)))
            .collect::<Result<Vec<_>, _>>()?;
        RotationTrajectory::new(poses).map_err(|e| SimError::InvalidConfig { field: "times", reason: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn yaw_profile(rate_deg: f64, duration: f64) -> MotionProfile {
        MotionProfile::constant_rate(Vec3::new(0.0, rate_deg.to_radians(), 0.0), duration)
    }

    #[test]
    fn identity_at_start() {
        let p = fit_frequencies(base_waves(PresetKind::Dm), 2.0, 2.0);
        assert_eq!(p.trajectory_at(0.0).unwrap(), Rotation::identity());
    }

    #[test]
    fn constant_rate_yaw() {
        let p = MotionProfile::constant_rate(Vec3::new(0.0, 0.0, 2.0944), 1.0);
        let r = p.trajectory_at(0.5).unwrap();
        assert!((r.angle().to_degrees() - 60.0).abs() < 1e-3);
        assert!(matches!(p.trajectory_at(1.5), Err(SimError::OutOfRange { .. })));
    }

    #[test]
    fn body_rate_matches_finite_differences() {
        let p = fit_frequencies(base_waves(PresetKind::Dm), 5.0, 2.0);
        let h = 1e-7;
        for i in 0..200 {
            let t = 0.01 + i as f64 * 0.0245;
            let numeric = (p.rotation(t - h).inverse() * p.rotation(t + h)).log() / (2.0 * h);
            assert!((numeric - p.body_rate(t)).amax() < 1e-6, "t={t}");
            assert!(p.body_rate(t).norm() <= p.rate_bound() + 1e-12);
        }
    }

    #[test]
    fn dm_rate_normalization() {
        let p = Preset::dm(1.0, 5.0).unwrap();
        assert!((p.profile.mean_rate(20_000).to_degrees() - 120.0).abs() < 1e-6);
        let fast = Preset::dm(3.25, 5.0).unwrap();
        assert!((fast.profile.mean_rate(20_000).to_degrees() - 390.0).abs() < 1e-6);
    }

    #[test]
    fn scene_is_reproducible() {
        let cap = SphereCap::new(Vec3::z(), 1.0);
        assert_eq!(generate_scene(3, 100, &cap), generate_scene(3, 100, &cap));
        assert_eq!(generate_scene(3, 1, &cap).len(), 1);
        assert!(generate_scene(3, 500, &cap).landmarks.iter().all(|p| cap.contains(p.vector())));
    }

    #[test]
    fn static_scene_emits_nothing() {
        let cap = SphereCap::new(Vec3::z(), 0.5);
        let scene = generate_scene(1, 200, &cap);
        let err = simulate_events(&scene, yaw_profile(0.0, 0.05), default_sim_camera(), SimConfig::default()).unwrap_err();
        assert!(matches!(err, SimError::NoEvents));
    }

    #[test]
    fn events_are_ordered_and_in_bounds() {
        let cap = SphereCap::new(Vec3::z(), 0.9);
        let scene = Scene::edges(2, 3000, &cap, 0.0025, (0.05, 0.2));
        let cam = default_sim_camera();
        let (events, gt) = simulate_events(&scene, yaw_profile(120.0, 0.1), cam.clone(), SimConfig::default()).unwrap();
        assert!(!events.is_empty());
        assert!(events.windows(2).all(|w| w[0].t <= w[1].t));
        assert!(events.iter().all(|e| (e.u as u32) < cam.width && (e.v as u32) < cam.height));
        assert_eq!(gt.len(), 10_001);
    }

    #[test]
    fn deterministic_stream() {
        let cap = SphereCap::new(Vec3::z(), 0.9);
        let scene = Scene::edges(4, 2000, &cap, 0.0025, (0.05, 0.2));
        let run = || simulate_events(&scene, yaw_profile(200.0, 0.05), default_sim_camera(), SimConfig::default()).unwrap().0;
        assert_eq!(run(), run());
    }
}
