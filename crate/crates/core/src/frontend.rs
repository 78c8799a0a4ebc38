//! Event input, segmentation into fixed-rate frames, and per-frame motion
//! compensation onto the unit sphere.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::geometry::{
    exp_matrix, BearingTable, CameraModel, GeometryError, SphericalPoint, StampedRotation, Vec2,
    Vec3,
};

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: timestamp {t} precedes previous event at {previous}")]
    Decreasing { line: usize, t: f64, previous: f64 },
    #[error("line {line}: event at ({u}, {v}) t={t} lies outside the {width}x{height} sensor")]
    OutOfBounds { line: usize, t: f64, u: i64, v: i64, width: u32, height: u32 },
    #[error("pose history has equal timestamps ({0})")]
    EqualTimestamps(f64),
    #[error("cannot compensate an empty segment")]
    EmptySegment,
    #[error("invalid frame config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("reading events: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }
}

/// One brightness-change event. Polarity is carried but unused downstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub t: f64,
    pub u: u16,
    pub v: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: f64, u: u16, v: u16, polarity: Polarity) -> Self {
        Event { t, u, v, polarity }
    }
}

/// Streaming reader for the `t u v p` text format.
pub struct EventReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    previous: f64,
    width: u32,
    height: u32,
}

impl<R: BufRead> EventReader<R> {
    pub fn new(reader: R, width: u32, height: u32) -> Self {
        EventReader { lines: reader.lines(), line_no: 0, previous: f64::NEG_INFINITY, width, height }
    }

    fn parse_line(&mut self, text: &str) -> Result<Event, FrontendError> {
        let line = self.line_no;
        let malformed = |reason: &str| FrontendError::Malformed { line, reason: reason.to_string() };
        let mut fields = text.split_ascii_whitespace();
        let (Some(t), Some(u), Some(v), Some(p), None) =
            (fields.next(), fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(malformed("expected 4 fields `t u v p`"));
        };
        let t: f64 = t.parse().map_err(|_| malformed("bad timestamp"))?;
        if !t.is_finite() || t < 0.0 {
            return Err(malformed("timestamp must be finite and non-negative"));
        }
        let u: i64 = u.parse().map_err(|_| malformed("bad pixel column"))?;
        let v: i64 = v.parse().map_err(|_| malformed("bad pixel row"))?;
        let polarity = match p {
            "1" => Polarity::Positive,
            "0" => Polarity::Negative,
            _ => return Err(malformed("polarity must be 0 or 1")),
        };
        if u < 0 || v < 0 || u >= self.width as i64 || v >= self.height as i64 {
            return Err(FrontendError::OutOfBounds {
                line,
                t,
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        if t < self.previous {
            return Err(FrontendError::Decreasing { line, t, previous: self.previous });
        }
        self.previous = t;
        Ok(Event { t, u: u as u16, v: v as u16, polarity })
    }
}

impl<R: BufRead> Iterator for EventReader<R> {
    type Item = Result<Event, FrontendError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(text) => text,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if text.trim().is_empty() {
                continue;
            }
            return Some(self.parse_line(&text));
        }
    }
}

/// Reads a whole event stream, validating format, ordering and bounds.
pub fn parse_event_stream<R: BufRead>(
    reader: R,
    width: u32,
    height: u32,
) -> Result<Vec<Event>, FrontendError> {
    EventReader::new(reader, width, height).collect()
}

/// Canonical text form of one event (nanosecond timestamps).
pub fn format_event(buf: &mut String, e: &Event) {
    let p = match e.polarity {
        Polarity::Positive => 1,
        Polarity::Negative => 0,
    };
    let _ = writeln!(buf, "{:.9} {} {} {}", e.t, e.u, e.v, p);
}

pub fn write_events<'a, W: Write>(
    mut out: W,
    events: impl IntoIterator<Item = &'a Event>,
) -> std::io::Result<()> {
    let mut buf = String::with_capacity(1 << 16);
    for e in events {
        format_event(&mut buf, e);
        if buf.len() > (1 << 16) - 64 {
            out.write_all(buf.as_bytes())?;
            buf.clear();
        }
    }
    out.write_all(buf.as_bytes())
}

/// Segmentation parameters: frames are the first `n` events of every `1/f`
/// window; windows holding fewer than `min_events` are skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameConfig {
    pub frequency: f64,
    pub n: usize,
    pub min_events: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig { frequency: 1000.0, n: 1500, min_events: 50 }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<(), FrontendError> {
        if !(self.frequency.is_finite() && self.frequency > 0.0) {
            return Err(FrontendError::InvalidConfig("frequency must be positive".into()));
        }
        if self.min_events < 1 {
            return Err(FrontendError::InvalidConfig("min_events must be at least 1".into()));
        }
        if self.n < self.min_events {
            return Err(FrontendError::InvalidConfig("n must be >= min_events".into()));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.frequency
    }
}

/// One `1/f` window of the stream. `events` holds at most `n` events.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub index: u64,
    /// Window start, anchored at the first event of the stream.
    pub start: f64,
    pub events: Vec<Event>,
    /// Events that fell into the window before truncation.
    pub total: usize,
    pub skipped: bool,
}

/// Streaming segmenter. Emits every window between the first and the last
/// event, including empty (skipped) ones.
pub struct Segmenter<I> {
    events: I,
    config: FrameConfig,
    origin: Option<f64>,
    pending: Option<(u64, Event)>,
    next_index: u64,
    done: bool,
}

impl<I> Segmenter<I> {
    pub fn new(events: I, config: FrameConfig) -> Self {
        Segmenter { events, config, origin: None, pending: None, next_index: 0, done: false }
    }

    fn index_of(&self, origin: f64, t: f64) -> u64 {
        ((t - origin) * self.config.frequency).floor().max(0.0) as u64
    }

    fn start_of(&self, origin: f64, index: u64) -> f64 {
        origin + index as f64 / self.config.frequency
    }

    fn finish(&self, index: u64, events: Vec<Event>, total: usize) -> Segment {
        let start = self.start_of(self.origin.unwrap_or(0.0), index);
        let skipped = events.len() < self.config.min_events;
        Segment { index, start, events, total, skipped }
    }
}

impl<I, E> Iterator for Segmenter<I>
where
    I: Iterator<Item = Result<Event, E>>,
{
    type Item = Result<Segment, E>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.pending.is_none() {
            match self.events.next() {
                None => {
                    self.done = true;
                    return None;
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                Some(Ok(e)) => {
                    let origin = *self.origin.get_or_insert(e.t);
                    self.pending = Some((self.index_of(origin, e.t), e));
                }
            }
        }
        let origin = self.origin.expect("origin set with first event");
        let (first_index, _) = self.pending.expect("pending event");
        let index = self.next_index;
        self.next_index += 1;
        if first_index > index {
            return Some(Ok(self.finish(index, Vec::new(), 0)));
        }

        let (_, first) = self.pending.take().expect("pending event");
        let mut events = Vec::with_capacity(self.config.n.min(4096));
        events.push(first);
        let mut total = 1;
        loop {
            match self.events.next() {
                None => {
                    self.done = true;
                    break;
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                Some(Ok(e)) => {
                    let idx = self.index_of(origin, e.t);
                    if idx == index {
                        total += 1;
                        if events.len() < self.config.n {
                            events.push(e);
                        }
                    } else {
                        self.pending = Some((idx, e));
                        break;
                    }
                }
            }
        }
        Some(Ok(self.finish(index, events, total)))
    }
}

/// Splits a time-ordered event slice into windows of `1/f` seconds.
pub fn segment_events(events: &[Event], config: &FrameConfig) -> Vec<Segment> {
    Segmenter::new(events.iter().copied().map(Ok::<_, std::convert::Infallible>), *config)
        .map(|s| match s {
            Ok(s) => s,
            Err(never) => match never {},
        })
        .collect()
}

/// Body angular velocity from the two most recent poses,
/// `log(R_{k-1}ᵀ R_k) / (t_k − t_{k-1})`. Zero with fewer than two poses.
pub fn estimate_omega(history: &[StampedRotation]) -> Result<Vec3, FrontendError> {
    let [.., prev, last] = history else {
        return Ok(Vec3::zeros());
    };
    let dt = last.t - prev.t;
    if dt == 0.0 {
        return Err(FrontendError::EqualTimestamps(last.t));
    }
    Ok((prev.rotation.inverse() * last.rotation).log() / dt)
}

/// Motion-compensated event frame; every point is expressed in the camera
/// orientation at `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSphericalFrame {
    pub t0: f64,
    pub points: Vec<SphericalPoint>,
}

impl EventSphericalFrame {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rotation that carries a bearing observed at `t0 + dt` back to the camera
/// orientation at `t0`, for body angular velocity `omega`.
#[inline]
fn warp(omega: &Vec3, dt: f64) -> crate::geometry::Mat3 {
    exp_matrix(&(omega * dt))
}

fn compensate_with<F>(events: &[Event], omega: &Vec3, mut bearing: F) -> Result<EventSphericalFrame, FrontendError>
where
    F: FnMut(&Event) -> Result<SphericalPoint, FrontendError>,
{
    let first = events.first().ok_or(FrontendError::EmptySegment)?;
    let t0 = first.t;
    let still = omega.iter().all(|w| *w == 0.0);
    let mut points = Vec::with_capacity(events.len());
    for e in events {
        let p = bearing(e)?;
        let dt = e.t - t0;
        if still || dt == 0.0 {
            points.push(p);
        } else {
            let q = warp(omega, dt) * p.vector();
            points.push(SphericalPoint::new_unchecked(q / q.norm()));
        }
    }
    Ok(EventSphericalFrame { t0, points })
}

/// Projects a segment onto the sphere and warps every event to the first
/// event's timestamp under constant body angular velocity `omega` (rad/s, the
/// output of [`estimate_omega`]).
pub fn compensate_frame(
    events: &[Event],
    omega: &Vec3,
    camera: &CameraModel,
) -> Result<EventSphericalFrame, FrontendError> {
    compensate_with(events, omega, |e| {
        Ok(camera.pixel_to_sphere(&Vec2::new(e.u as f64, e.v as f64))?)
    })
}

/// [`compensate_frame`] using a precomputed bearing table.
pub fn compensate_frame_with_table(
    events: &[Event],
    omega: &Vec3,
    table: &BearingTable,
) -> Result<EventSphericalFrame, FrontendError> {
    compensate_with(events, omega, |e| {
        table.get(e.u, e.v).copied().ok_or_else(|| {
            FrontendError::Geometry(GeometryError::InvalidCamera {
                field: "width",
                reason: format!("pixel ({}, {}) outside bearing table", e.u, e.v),
            })
        })
    })
}
