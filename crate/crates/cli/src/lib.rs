//! `poiloc` command line: grid generation, the HTTP server, one-shot
//! geolocation and projection queries, and the accuracy and scaling harnesses.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use poiloc_core::analysis::{self, AccuracyOptions, AccuracyReport, MarkerPlacement};
use poiloc_core::geodesy::GeodeticCoord;
use poiloc_core::projection::{self, pose_from_gimbal, CameraIntrinsics, CameraPose, GroundModel, PixelCoord, Quaternion};
use poiloc_core::simkit::{self, GridOutput, NoiseModel, ScenarioConfig};
use poiloc_server::scaling::{self, PerfRecord, ScalingConfig};
use poiloc_server::{ServerConfig, ServerHandle};
use serde::Serialize;

pub const SERVER_ENV: &str = "POILOC_SERVER";

#[derive(Debug, Parser)]
#[command(name = "poiloc", version, about = "POI geolocation engine, sync server and experiment harnesses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic fly-over grid (telemetry plus truth files).
    Generate(GenerateArgs),
    /// Run the HTTP server until interrupted.
    Serve(ServeArgs),
    /// Geolocate one pixel from an explicit camera pose.
    Geolocate(GeolocateArgs),
    /// Project one world point into an explicit camera pose.
    Project(ProjectArgs),
    /// Run the geolocation and marker accuracy harnesses and write CSVs.
    Accuracy(AccuracyArgs),
    /// Run the multi-UAV scaling harness against a server.
    Scale(ScaleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoisePreset {
    /// No injected noise.
    Zero,
    /// Default sensor noise.
    Default,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Seed for every random draw.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames kept per altitude/pitch/velocity cell.
    #[arg(long)]
    pub frames_per_cell: Option<usize>,
    /// Comma-separated flight heights above ground, in meters.
    #[arg(long, value_delimiter = ',')]
    pub altitudes: Option<Vec<f64>>,
    /// Comma-separated gimbal pitches below the horizon, in degrees.
    #[arg(long, value_delimiter = ',')]
    pub pitches: Option<Vec<f64>>,
    /// Comma-separated ground speeds, in m/s.
    #[arg(long, value_delimiter = ',')]
    pub velocities: Option<Vec<f64>>,
    /// Noise preset applied before the per-source overrides.
    #[arg(long, value_enum, default_value_t = NoisePreset::Default)]
    pub noise: NoisePreset,
    /// Horizontal GPS noise standard deviation, in meters.
    #[arg(long)]
    pub gps_sigma: Option<f64>,
    /// Altitude noise standard deviation, in meters.
    #[arg(long)]
    pub alt_sigma: Option<f64>,
    /// Orientation noise standard deviation per camera axis, in degrees.
    #[arg(long)]
    pub orient_sigma: Option<f64>,
    /// Click noise standard deviation per pixel axis.
    #[arg(long)]
    pub pixel_sigma: Option<f64>,
}

impl GridArgs {
    fn is_customized(&self) -> bool {
        self.seed.is_some()
            || self.frames_per_cell.is_some()
            || self.altitudes.is_some()
            || self.pitches.is_some()
            || self.velocities.is_some()
            || self.noise != NoisePreset::Default
            || self.gps_sigma.is_some()
            || self.alt_sigma.is_some()
            || self.orient_sigma.is_some()
            || self.pixel_sigma.is_some()
    }

    pub fn scenario(&self) -> ScenarioConfig {
        let d = ScenarioConfig::default();
        ScenarioConfig {
            rng_seed: self.seed.unwrap_or(d.rng_seed),
            frames_per_cell: self.frames_per_cell.unwrap_or(d.frames_per_cell),
            altitudes_m: self.altitudes.clone().unwrap_or(d.altitudes_m.clone()),
            pitches_deg: self.pitches.clone().unwrap_or(d.pitches_deg.clone()),
            velocities_mps: self.velocities.clone().unwrap_or(d.velocities_mps.clone()),
            ..d
        }
    }

    pub fn noise_model(&self) -> NoiseModel {
        let base = match self.noise {
            NoisePreset::Zero => NoiseModel::zero(),
            NoisePreset::Default => NoiseModel::default(),
        };
        NoiseModel {
            gps_sigma_m: self.gps_sigma.unwrap_or(base.gps_sigma_m),
            alt_sigma_m: self.alt_sigma.unwrap_or(base.alt_sigma_m),
            orient_sigma_deg: self.orient_sigma.unwrap_or(base.orient_sigma_deg),
            pixel_sigma_px: self.pixel_sigma.unwrap_or(base.pixel_sigma_px),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory for manifest.json and cells/.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address.
    #[arg(long, env = "POILOC_LISTEN", default_value = poiloc_server::DEFAULT_LISTEN)]
    pub listen: std::net::SocketAddr,
    /// POI journal file; POIs are kept in memory when omitted.
    #[arg(long, env = "POILOC_STORE")]
    pub store: Option<PathBuf>,
    /// Records buffered per stream subscriber before it is disconnected.
    #[arg(long, env = "POILOC_BUFFER", default_value_t = poiloc_server::DEFAULT_STREAM_BUFFER)]
    pub buffer: usize,
}

/// Parses exactly `N` comma-separated numbers.
fn parse_list<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated numbers, got {}", parts.len()));
    }
    let mut out = [0.0; N];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(out)
}

#[derive(Debug, Args)]
pub struct PoseArgs {
    /// Camera latitude, degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub lat: f64,
    /// Camera longitude, degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub lon: f64,
    /// Camera ellipsoidal height, meters.
    #[arg(long, allow_negative_numbers = true)]
    pub alt: f64,
    /// Gimbal heading clockwise from north, degrees.
    #[arg(long, allow_negative_numbers = true, conflicts_with = "quat")]
    pub heading: Option<f64>,
    /// Gimbal pitch below the horizon, degrees (90 looks straight down).
    #[arg(long, allow_negative_numbers = true, conflicts_with = "quat")]
    pub pitch: Option<f64>,
    /// Camera-to-ENU orientation as w,x,y,z instead of heading and pitch.
    #[arg(long, value_parser = parse_list::<4>, allow_hyphen_values = true)]
    pub quat: Option<[f64; 4]>,
    /// Image width, pixels.
    #[arg(long, default_value_t = 1920)]
    pub width: u32,
    /// Image height, pixels.
    #[arg(long, default_value_t = 1080)]
    pub height: u32,
    /// Horizontal field of view, degrees.
    #[arg(long, default_value_t = 69.0)]
    pub hfov: f64,
    /// Mission frame origin as lat,lon,alt; defaults to below the camera at the reference height.
    #[arg(long, value_parser = parse_list::<3>, allow_hyphen_values = true)]
    pub origin: Option<[f64; 3]>,
    /// Print one JSON line instead of text.
    #[arg(long)]
    pub json: bool,
}

impl PoseArgs {
    fn pose(&self) -> anyhow::Result<(CameraPose, CameraIntrinsics)> {
        let position = GeodeticCoord::new(self.lat, self.lon, self.alt).map_err(usage)?;
        let orientation = match (&self.quat, self.pitch) {
            (Some(q), _) => {
                let norm = Quaternion::raw_norm(q[0], q[1], q[2], q[3]);
                if !((norm - 1.0).abs() < poiloc_core::telemetry::QUATERNION_NORM_TOLERANCE) {
                    return Err(usage(format!("--quat must have unit norm, got {norm}")));
                }
                Quaternion::new(q[0], q[1], q[2], q[3]).map_err(usage)?
            }
            (None, Some(p)) => pose_from_gimbal(self.heading.unwrap_or(0.0), p),
            (None, None) => return Err(usage("either --pitch or --quat is required")),
        };
        let intr = CameraIntrinsics::new(self.width, self.height, self.hfov).map_err(usage)?;
        Ok((
            CameraPose {
                position,
                orientation,
            },
            intr,
        ))
    }

    fn origin(&self, pose: &CameraPose, reference_alt_m: f64) -> anyhow::Result<GeodeticCoord> {
        match &self.origin {
            Some(o) => GeodeticCoord::new(o[0], o[1], o[2]).map_err(usage),
            None => pose.position.with_alt(reference_alt_m).map_err(usage),
        }
    }
}

#[derive(Debug, Args)]
pub struct GeolocateArgs {
    #[command(flatten)]
    pub pose: PoseArgs,
    /// Pixel as u,v; use "center" for the principal point.
    #[arg(long)]
    pub pixel: String,
    /// Height of the flat local ground plane, meters.
    #[arg(long, allow_negative_numbers = true, conflicts_with = "ellipsoid_offset")]
    pub ground_alt: Option<f64>,
    /// Intersect with the WGS-84 ellipsoid raised by this many meters instead.
    #[arg(long, allow_negative_numbers = true)]
    pub ellipsoid_offset: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub pose: PoseArgs,
    /// World point as lat,lon,alt.
    #[arg(long, value_parser = parse_list::<3>, allow_hyphen_values = true)]
    pub poi: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Placement {
    /// Marker anchored at the surveyed POI.
    Truth,
    /// Marker anchored at each frame's own geolocation.
    Computed,
}

#[derive(Debug, Args)]
pub struct AccuracyArgs {
    /// "default" to generate the grid in memory, or a directory written by `generate`.
    #[arg(long, default_value = "default")]
    pub grid: String,
    /// Output directory for the CSV files.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub grid_args: GridArgs,
    /// Where markers are anchored for the pixel-distance harness.
    #[arg(long, value_enum, default_value_t = Placement::Truth)]
    pub placement: Placement,
    /// Marker disc radius, pixels.
    #[arg(long, default_value_t = analysis::DEFAULT_MARKER_RADIUS_PX)]
    pub marker_radius: f64,
    /// Print summaries as JSON lines instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    /// Server base URL.
    #[arg(long, env = SERVER_ENV, default_value = "http://127.0.0.1:8080", conflicts_with = "in_process")]
    pub server: String,
    /// Start a server inside this process instead of using --server.
    #[arg(long)]
    pub in_process: bool,
    /// Comma-separated fleet sizes.
    #[arg(long, value_delimiter = ',', default_values_t = scaling::DEFAULT_FLEET_SIZES)]
    pub uavs: Vec<usize>,
    /// Records per second per UAV.
    #[arg(long, default_value_t = 10.0)]
    pub fps: f64,
    /// Publishing time per fleet size, seconds.
    #[arg(long, default_value_t = 60.0)]
    pub duration: f64,
    /// Output directory for scaling.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Print records as JSON lines instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// Invalid arguments that clap cannot check on its own.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

/// Exit status for an error returned by [`run`]: 2 for usage errors, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.is::<UsageError>() {
        2
    } else {
        1
    }
}

/// One-line JSON form of an error, written to stderr.
pub fn error_json_line(e: &anyhow::Error) -> String {
    let kind = if e.is::<UsageError>() { "usage" } else { "runtime" };
    serde_json::json!({ "error": kind, "message": format!("{e:#}") }).to_string()
}

/// Runs a parsed command, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a, out),
        Command::Serve(a) => serve(a),
        Command::Geolocate(a) => geolocate(a, out),
        Command::Project(a) => project(a, out),
        Command::Accuracy(a) => accuracy(a, out),
        Command::Scale(a) => scale(a, out),
    }
}

fn generate(a: GenerateArgs, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    let cfg = a.grid.scenario();
    let noise = a.grid.noise_model();
    cfg.validate().map_err(usage)?;
    noise.validate().map_err(usage)?;
    let grid = simkit::generate_grid(&cfg, &noise)?;
    let manifest = simkit::write_grid(&a.out, &grid)?;
    writeln!(
        out,
        "wrote {} cells, {} frames: {}",
        grid.cells.len(),
        grid.frame_count(),
        manifest.display()
    )?;
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let config = ServerConfig {
        listen: a.listen,
        store_path: a.store,
        stream_buffer: a.buffer,
        worker_threads: None,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let state = poiloc_server::AppState::open(&config)?;
        let listener = tokio::net::TcpListener::bind(config.listen)
            .await
            .with_context(|| format!("binding {}", config.listen))?;
        tracing::info!("listening on {}", listener.local_addr()?);
        poiloc_server::serve_until(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}

fn parse_pixel(s: &str, intr: &CameraIntrinsics) -> anyhow::Result<PixelCoord> {
    if s == "center" {
        return Ok(intr.principal_point());
    }
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [u, v] => {
            let u = u.trim().parse::<f64>().map_err(|e| usage(format!("--pixel u: {e}")))?;
            let v = v.trim().parse::<f64>().map_err(|e| usage(format!("--pixel v: {e}")))?;
            Ok(PixelCoord::new(u, v))
        }
        _ => Err(usage("--pixel must be u,v or center")),
    }
}

#[derive(Serialize)]
struct GeolocateOutput {
    lat_deg: f64,
    lon_deg: f64,
    alt_m: f64,
}

fn geolocate(a: GeolocateArgs, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    let (pose, intr) = a.pose.pose()?;
    let px = parse_pixel(&a.pixel, &intr)?;
    let ground = match (a.ground_alt, a.ellipsoid_offset) {
        (_, Some(offset_alt_m)) => GroundModel::Ellipsoid { offset_alt_m },
        (Some(ground_alt_m), None) => GroundModel::LocalPlane { ground_alt_m },
        (None, None) => return Err(usage("one of --ground-alt or --ellipsoid-offset is required")),
    };
    let reference = match ground {
        GroundModel::LocalPlane { ground_alt_m } => ground_alt_m,
        GroundModel::Ellipsoid { offset_alt_m } => offset_alt_m,
    };
    let origin = a.pose.origin(&pose, reference)?;
    let hit = projection::geolocate(&pose, &intr, &px, &ground, &origin)?;
    let result = GeolocateOutput {
        lat_deg: hit.lat_deg(),
        lon_deg: hit.lon_deg(),
        alt_m: hit.alt_m(),
    };
    if a.pose.json {
        writeln!(out, "{}", serde_json::to_string(&result)?)?;
    } else {
        writeln!(out, "lat_deg {}\nlon_deg {}\nalt_m {}", result.lat_deg, result.lon_deg, result.alt_m)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ProjectOutput {
    u_px: f64,
    v_px: f64,
    in_frame: bool,
}

fn project(a: ProjectArgs, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    let (pose, intr) = a.pose.pose()?;
    let poi = GeodeticCoord::new(a.poi[0], a.poi[1], a.poi[2]).map_err(usage)?;
    let origin = a.pose.origin(&pose, poi.alt_m())?;
    let p = projection::project(&pose, &intr, &poi, &origin)?;
    let result = ProjectOutput {
        u_px: p.pixel.u,
        v_px: p.pixel.v,
        in_frame: p.in_frame,
    };
    if a.pose.json {
        writeln!(out, "{}", serde_json::to_string(&result)?)?;
    } else {
        writeln!(out, "u_px {}\nv_px {}\nin_frame {}", result.u_px, result.v_px, result.in_frame)?;
    }
    Ok(())
}

fn accuracy(a: AccuracyArgs, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    let grid: GridOutput = if a.grid == "default" {
        let cfg = a.grid_args.scenario();
        let noise = a.grid_args.noise_model();
        cfg.validate().map_err(usage)?;
        noise.validate().map_err(usage)?;
        simkit::generate_grid(&cfg, &noise)?
    } else {
        if a.grid_args.is_customized() {
            return Err(usage("grid overrides and --seed only apply to --grid default"));
        }
        analysis_grid(Path::new(&a.grid))?
    };
    if !(a.marker_radius >= 0.0 && a.marker_radius.is_finite()) {
        return Err(usage("--marker-radius must be non-negative"));
    }
    let opts = AccuracyOptions {
        placement: match a.placement {
            Placement::Truth => MarkerPlacement::Truth,
            Placement::Computed => MarkerPlacement::Computed,
        },
        marker_radius_px: a.marker_radius,
        ..Default::default()
    };
    let geo = analysis::run_geolocation_accuracy(&grid, &opts);
    let marker = analysis::run_marker_accuracy(&grid, &opts);

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    analysis::emit_csv(&geo.records, &a.out.join("records.csv"))?;
    analysis::emit_summary(geo.summaries().chain(marker.summaries()), &a.out.join("summary.csv"))?;

    for report in [&geo, &marker] {
        print_report(report, a.json, out)?;
    }
    let failures = geo.failures.len();
    if failures > 0 {
        writeln!(out, "{failures} frames could not be evaluated")?;
    }
    Ok(())
}

fn analysis_grid(dir: &Path) -> anyhow::Result<GridOutput> {
    Ok(simkit::load_grid(dir).map_err(analysis::AnalysisError::from)?)
}

fn print_report(report: &AccuracyReport, json: bool, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    for s in report.summaries() {
        if json {
            writeln!(out, "{}", serde_json::to_string(s)?)?;
        } else {
            let reference = match report.metric {
                analysis::Metric::HorizErrM => analysis::field_reference_mean_m(s.grouping, s.key)
                    .map(|v| format!("  (field {v})"))
                    .unwrap_or_default(),
                analysis::Metric::PixelDistPx => String::new(),
            };
            writeln!(
                out,
                "{:<14} {:<8} {:>5}  n={:<5} mean={:.3} median={:.3} std={:.3} min={:.3} max={:.3}{reference}",
                s.metric.as_str(),
                s.grouping.as_str(),
                s.key,
                s.n,
                s.mean,
                s.median,
                s.std,
                s.min,
                s.max
            )?;
        }
    }
    Ok(())
}

pub const SCALING_HEADER: [&str; 11] = [
    "n_uavs",
    "records_sent",
    "records_processed",
    "records_per_s",
    "offered_per_s",
    "latency_p50_ms",
    "latency_p99_ms",
    "peak_mb",
    "cpu_time_s",
    "subscribers_dropped",
    "overload",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn scaling_csv(records: &[PerfRecord]) -> String {
    let mut s = SCALING_HEADER.join(",") + "\n";
    for r in records {
        s += &[
            r.n_uavs.to_string(),
            r.records_sent.to_string(),
            r.records_processed.to_string(),
            r.records_per_s.to_string(),
            r.offered_per_s.to_string(),
            r.latency_p50_ms.to_string(),
            r.latency_p99_ms.to_string(),
            opt(r.peak_mb),
            opt(r.cpu_time_s),
            r.subscribers_dropped.to_string(),
            r.overload.to_string(),
        ]
        .join(",");
        s.push('\n');
    }
    s
}

fn scale(a: ScaleArgs, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    let cfg = ScalingConfig {
        n_uavs: a.uavs,
        fps: a.fps,
        duration_s: a.duration,
        ..Default::default()
    };
    cfg.validate().map_err(usage)?;
    let server = if a.in_process {
        Some(ServerHandle::start(ServerConfig {
            listen: "127.0.0.1:0".parse().expect("valid address"),
            ..Default::default()
        })?)
    } else {
        None
    };
    let base = server.as_ref().map_or(a.server.clone(), |s| s.base_url());
    let rt = tokio::runtime::Runtime::new()?;
    let records = rt.block_on(scaling::run_scaling(&base, &cfg))?;
    if let Some(s) = server {
        s.stop(Duration::from_secs(2));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("scaling.csv"), scaling_csv(&records))?;
    for r in &records {
        if a.json {
            writeln!(out, "{}", serde_json::to_string(r)?)?;
        } else {
            writeln!(
                out,
                "n={:<3} {:.1}/{:.1} rec/s  p50={:.2} ms  p99={:.2} ms  peak={} MB  cpu={} s{}",
                r.n_uavs,
                r.records_per_s,
                r.offered_per_s,
                r.latency_p50_ms,
                r.latency_p99_ms,
                opt(r.peak_mb.map(|m| (m * 10.0).round() / 10.0)),
                opt(r.cpu_time_s.map(|c| (c * 100.0).round() / 100.0)),
                if r.overload { "  OVERLOAD" } else { "" }
            )?;
        }
    }
    Ok(())
}
