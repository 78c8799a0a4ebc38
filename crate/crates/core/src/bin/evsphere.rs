use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use evsphere::eval::{evaluate, RotationTrajectory};
use evsphere::frontend::{parse_event_stream, write_events, Event, FrontendError};
use evsphere::geometry::{BearingTable, CameraModel};
use evsphere::map::{read_map, write_map};
use evsphere::panorama::{apply_view, camera_to_panorama_view, event_window_points, render_panorama, PanoramaSpec};
use evsphere::pipeline::{run_odometry, Overrides, PipelineConfig};
use evsphere::sim::{Preset, PresetKind};

#[derive(Parser)]
#[command(name = "evsphere", version, about = "Rotational event-camera odometry on the unit sphere")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a preset sequence: events, ground truth, camera and config.
    Simulate(SimulateArgs),
    /// Track rotation and build the spherical map.
    Track(TrackArgs),
    /// Render a panorama from a map or from events and a trajectory.
    Panorama(PanoramaArgs),
    /// Compare an estimated trajectory against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    Dm,
    Ld,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    preset: PresetName,
    /// Multiplies the mean angular rate of the dm preset.
    #[arg(long, default_value_t = 1.0)]
    rate_scale: f64,
    /// Sequence length in seconds.
    #[arg(long)]
    duration: f64,
    /// Ground-truth sampling step in microseconds.
    #[arg(long, default_value_t = 100)]
    gt_step_us: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    events: PathBuf,
    /// Output directory; falls back to `output` in the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Frame frequency in Hz.
    #[arg(long)]
    fps: Option<f64>,
    /// Events per frame.
    #[arg(long)]
    n: Option<usize>,
    /// Keyframe threshold in radians.
    #[arg(long)]
    theta_t: Option<f64>,
    #[arg(long)]
    voxel: Option<f64>,
    /// Neighbours per line fit.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["map", "events"]))]
struct PanoramaArgs {
    /// Map snapshot written by `track`.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, requires_all = ["traj", "camera"])]
    events: Option<PathBuf>,
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long)]
    camera: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    width: u32,
    #[arg(long, default_value_t = 1000)]
    height: u32,
    /// Horizontal span in degrees.
    #[arg(long, default_value_t = 360.0)]
    phi_h: f64,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 90.0)]
    phi_v: f64,
    #[arg(long, default_value_t = 0.9)]
    percentile: f64,
    /// Event window in seconds, ending at `--end`.
    #[arg(long, default_value_t = 2e-4)]
    window: f64,
    /// End of the event window; defaults to just after the last event.
    #[arg(long)]
    end: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Skip the first-pose alignment.
    #[arg(long)]
    no_align: bool,
    /// Association gate in seconds; defaults to half the estimate period.
    #[arg(long)]
    max_dt: Option<f64>,
    /// RPE interval in degrees.
    #[arg(long, default_value_t = 10.0)]
    delta: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Track(a) => track(a),
        Command::Panorama(a) => panorama(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let preset = match a.preset {
        PresetName::Dm => Preset::dm(a.rate_scale, a.duration)?,
        PresetName::Ld => {
            if a.rate_scale != 1.0 {
                bail!("--rate-scale only applies to the dm preset");
            }
            Preset::ld(a.duration)?
        }
    };
    let step_ns = a.gt_step_us * 1000;
    if step_ns == 0 || step_ns % preset.config.step_ns != 0 {
        bail!("--gt-step-us must be a positive multiple of {} µs", preset.config.step_ns / 1000);
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let events_path = a.out.join("events.txt");
    let mut writer = BufWriter::new(File::create(&events_path)?);
    let mut count = 0u64;
    let mut batch = Vec::with_capacity(1 << 14);
    for e in preset.simulator()?.events() {
        batch.push(e?);
        if batch.len() == batch.capacity() {
            write_events(&mut writer, &batch)?;
            count += batch.len() as u64;
            batch.clear();
        }
    }
    write_events(&mut writer, &batch)?;
    count += batch.len() as u64;
    writer.flush()?;

    preset.profile.sample(step_ns).save(&a.out.join("groundtruth.txt"))?;
    fs::write(a.out.join("camera.txt"), preset.camera.to_kv_string())?;
    let frequency = match preset.kind {
        PresetKind::Dm => 1000,
        PresetKind::Ld => 200,
    };
    fs::write(a.out.join("config.txt"), format!("camera camera.txt\nfrequency {frequency}\n"))?;
    info!(
        "{count} events over {} s (mean rate {:.1} deg/s) written to {}",
        a.duration,
        preset.profile.mean_rate(20_000).to_degrees(),
        a.out.display()
    );
    Ok(())
}

fn read_events(path: &Path, camera: &CameraModel) -> Result<Vec<Event>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_event_stream(BufReader::new(file), camera.width, camera.height)
        .with_context(|| format!("reading {}", path.display()))
}

fn track(a: TrackArgs) -> Result<()> {
    let overrides = Overrides { frequency: a.fps, n: a.n, theta_t: a.theta_t, voxel_size: a.voxel, k_neighbors: a.k };
    let config = PipelineConfig::load(&a.config, &overrides).with_context(|| format!("loading {}", a.config.display()))?;
    let Some(out) = a.out.or(config.output_dir.clone()) else {
        bail!("no output directory: pass --out or set `output` in the config");
    };
    let camera = CameraModel::load(&config.camera_path)?;
    let events = read_events(&a.events, &camera)?;
    let result = run_odometry(&config.odometry, &camera, events.into_iter().map(Ok::<_, FrontendError>))?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("trajectory.txt"), result.trajectory_text())?;
    fs::write(out.join("diagnostics.txt"), result.diagnostics_text())?;
    write_map(&out.join("map.txt"), result.map.points())?;
    if let Some(spec) = &config.panorama {
        let points = apply_view(result.map.points(), &camera_to_panorama_view());
        render_panorama(&points, spec)?.write_pgm(&out.join("panorama.pgm"))?;
    }
    info!(
        "{} frames, {} map points, realtime ratio {:.2}",
        result.estimates.len(),
        result.map.len(),
        result.realtime_ratio()
    );
    Ok(())
}

fn panorama(a: PanoramaArgs) -> Result<()> {
    let spec = PanoramaSpec {
        phi_h: a.phi_h.to_radians(),
        phi_v: a.phi_v.to_radians(),
        width: a.width,
        height: a.height,
        percentile: a.percentile,
    };
    spec.validate()?;
    let points = if let Some(map) = &a.map {
        read_map(map).with_context(|| format!("reading {}", map.display()))?
    } else {
        let (events, traj, camera) = (a.events.unwrap(), a.traj.unwrap(), a.camera.unwrap());
        let camera = CameraModel::load(&camera)?;
        let events = read_events(&events, &camera)?;
        let traj = RotationTrajectory::load(&traj).with_context(|| format!("reading {}", traj.display()))?;
        if !(a.window > 0.0) {
            bail!("--window must be positive");
        }
        let end = a.end.unwrap_or_else(|| events.last().map_or(0.0, |e| e.t + 1e-9));
        event_window_points(&events, &BearingTable::new(&camera)?, traj.poses(), end, a.window)
    };
    if points.is_empty() {
        warn!("no points to render; writing an empty panorama");
    }
    let image = render_panorama(&apply_view(&points, &camera_to_panorama_view()), &spec)?;
    image.write_pgm(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    info!("{} points rendered to {}", image.total_count(), a.out.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let est = RotationTrajectory::load(&a.est).with_context(|| format!("reading {}", a.est.display()))?;
    let gt = RotationTrajectory::load(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    let max_dt = match a.max_dt {
        Some(v) => v,
        None => half_period(&est),
    };
    let report = evaluate(&est, &gt, max_dt, !a.no_align, a.delta)?;
    fs::write(&a.out, report.to_string()).with_context(|| format!("writing {}", a.out.display()))?;
    print!("{report}");
    Ok(())
}

/// Half the median spacing of the estimate stamps.
fn half_period(est: &RotationTrajectory) -> f64 {
    let mut gaps: Vec<f64> = est.poses().windows(2).map(|w| w[1].t - w[0].t).collect();
    if gaps.is_empty() {
        return 5e-4;
    }
    gaps.sort_by(f64::total_cmp);
    0.5 * gaps[gaps.len() / 2]
}
