//! Synthetic fly-over generator for the altitude × pitch × velocity
//! experiment grid.
//!
//! Each cell flies constant-altitude straight passes whose ground track runs
//! through the POI. The first pass is phased so one frame has the POI exactly
//! on the principal point; further passes use random cross-track offsets and
//! frame phases so the POI lands across the whole image. From all frames that
//! see the POI, `frames_per_cell` are picked with a minimum pixel spacing of 5%
//! of the frame width where the geometry allows it.
//!
//! Noise is applied to the delivered telemetry and to the click pixel only;
//! every `truth_*` field is noiseless. Noise draws and slot targets come from
//! streams shared by all cells of a seed, so cells compared against each
//! other differ only in flight geometry.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{EnuFrame, GeodesyError, GeodeticCoord};
use crate::projection::{
    pose_from_gimbal, project_in, CameraIntrinsics, CameraPose, GroundModel, PixelCoord, ProjectionError,
    Quaternion,
};
use crate::telemetry::{FrameMeta, TelemetryRecord, TelemetryWriter};

/// Start of the synthetic mission clock (unix ms).
pub const EPOCH_MS: u64 = 1_700_000_000_000;
/// Turn-around time between passes of one cell.
const PASS_GAP_S: f64 = 10.0;
/// Minimum spacing between selected POI pixels, as a fraction of frame width.
const MIN_SPACING_FRAC: f64 = 0.05;
const NOISE_STREAM: u64 = u64::MAX;
const TARGET_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("infeasible scenario for cell {cell}: {reason}")]
    InfeasibleScenario { cell: String, reason: String },
    #[error("missing truth data: {0}")]
    MissingTruth(String),
    #[error("corrupt grid file {path}: {reason}")]
    CorruptGrid { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Flight heights above the ground surface.
    pub altitudes_m: Vec<f64>,
    /// Gimbal pitch below the horizon; 90 looks straight down.
    pub pitches_deg: Vec<f64>,
    pub velocities_mps: Vec<f64>,
    pub fps: f64,
    pub frames_per_cell: usize,
    /// Ellipsoidal height of the (flat) ground.
    pub ground_alt_m: f64,
    pub poi_truth: GeodeticCoord,
    pub mission_origin: GeodeticCoord,
    pub rng_seed: u64,
    pub intrinsics: CameraIntrinsics,
    /// Ground-track heading of every pass, clockwise from north.
    pub heading_deg: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let ground_alt_m = 142.0;
        let poi_truth = GeodeticCoord::new(38.6367, -90.2342, ground_alt_m).expect("valid default POI");
        // Launch point 30 m south and 20 m west of the POI.
        let mission_origin = EnuFrame::new(poi_truth)
            .from_enu(&Vector3::new(-20.0, -30.0, 0.0))
            .and_then(|p| p.with_alt(ground_alt_m))
            .expect("valid default origin");
        Self {
            altitudes_m: vec![10.0, 20.0, 30.0],
            pitches_deg: vec![45.0, 60.0, 75.0, 90.0],
            velocities_mps: vec![5.0, 10.0, 15.0],
            fps: 5.0,
            frames_per_cell: 10,
            ground_alt_m,
            poi_truth,
            mission_origin,
            rng_seed: 0,
            intrinsics: CameraIntrinsics {
                width_px: 1920,
                height_px: 1080,
                hfov_deg: 69.0,
            },
            heading_deg: 0.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        if self.altitudes_m.is_empty() || self.pitches_deg.is_empty() || self.velocities_mps.is_empty() {
            return bad("altitude, pitch and velocity lists must be non-empty".into());
        }
        if !finite(&self.altitudes_m) || self.altitudes_m.iter().any(|&a| a <= 0.0) {
            return bad(format!("altitudes must be above ground: {:?}", self.altitudes_m));
        }
        if !finite(&self.pitches_deg) || self.pitches_deg.iter().any(|&p| p <= 0.0 || p > 90.0) {
            return bad(format!("pitches must lie in (0, 90]: {:?}", self.pitches_deg));
        }
        if !finite(&self.velocities_mps) || self.velocities_mps.iter().any(|&v| v <= 0.0) {
            return bad(format!("velocities must be positive: {:?}", self.velocities_mps));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.frames_per_cell == 0 {
            return bad("frames_per_cell must be at least 1".into());
        }
        if !self.ground_alt_m.is_finite() || !self.heading_deg.is_finite() {
            return bad("ground altitude and heading must be finite".into());
        }
        self.intrinsics.validate()?;
        Ok(())
    }

    pub fn ground_model(&self) -> GroundModel {
        GroundModel::LocalPlane {
            ground_alt_m: self.ground_alt_m,
        }
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for (ai, &altitude_m) in self.altitudes_m.iter().enumerate() {
            for (pi, &pitch_deg) in self.pitches_deg.iter().enumerate() {
                for (vi, &velocity_mps) in self.velocities_mps.iter().enumerate() {
                    let index = (ai * self.pitches_deg.len() + pi) * self.velocities_mps.len() + vi;
                    out.push(CellKey {
                        index,
                        altitude_m,
                        pitch_deg,
                        velocity_mps,
                    });
                }
            }
        }
        out
    }

    /// The POI snapped onto the local ground plane, so that plane-mode
    /// geolocation of a noiseless click reproduces it exactly.
    pub fn ground_truth_poi(&self) -> Result<GeodeticCoord, SimError> {
        let frame = EnuFrame::new(self.mission_origin);
        let mut p = frame.to_enu(&self.poi_truth);
        p.z = self.ground_alt_m - self.mission_origin.alt_m();
        Ok(frame.from_enu(&p)?)
    }
}

/// Standard deviations of the injected sensor errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Horizontal GPS error per ENU axis.
    pub gps_sigma_m: f64,
    pub alt_sigma_m: f64,
    /// Small-angle rotation about each camera axis.
    pub orient_sigma_deg: f64,
    /// Click / detection error per pixel axis.
    pub pixel_sigma_px: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            gps_sigma_m: 1.0,
            alt_sigma_m: 0.5,
            orient_sigma_deg: 0.5,
            pixel_sigma_px: 2.0,
        }
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            gps_sigma_m: 0.0,
            alt_sigma_m: 0.0,
            orient_sigma_deg: 0.0,
            pixel_sigma_px: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::zero()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let all = [self.gps_sigma_m, self.alt_sigma_m, self.orient_sigma_deg, self.pixel_sigma_px];
        if all.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(SimError::InvalidConfig(format!("noise sigmas must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    /// ENU position error (east, north, up) in meters.
    pub fn sample_position_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        Vector3::new(
            gauss(rng, self.gps_sigma_m),
            gauss(rng, self.gps_sigma_m),
            gauss(rng, self.alt_sigma_m),
        )
    }

    /// Camera-frame rotation error applied after the true orientation.
    pub fn sample_orientation_error<R: Rng + ?Sized>(&self, rng: &mut R) -> UnitQuaternion<f64> {
        let s = self.orient_sigma_deg.to_radians();
        let (ex, ey, ez) = (gauss(rng, s), gauss(rng, s), gauss(rng, s));
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), ex)
            * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), ey)
            * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), ez)
    }

    pub fn sample_pixel_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        (gauss(rng, self.pixel_sigma_px), gauss(rng, self.pixel_sigma_px))
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("sigma validated").sample(rng)
}

/// One (altitude, pitch, velocity) combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    /// Position in the config's altitude-major cell order; seeds the cell RNG.
    pub index: usize,
    pub altitude_m: f64,
    pub pitch_deg: f64,
    pub velocity_mps: f64,
}

impl CellKey {
    pub fn label(&self) -> String {
        format!("a{}_p{}_v{}", self.altitude_m, self.pitch_deg, self.velocity_mps)
    }
}

/// A delivered frame plus the noiseless quantities it was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthFrame {
    /// Telemetry as delivered, noise included.
    pub meta: FrameMeta,
    pub truth_pose: CameraPose,
    /// Where the POI center really appears in the image.
    pub truth_pixel: PixelCoord,
    /// Operator click / detector output for the POI: `truth_pixel` plus pixel noise.
    pub click_pixel: PixelCoord,
    pub truth_poi: GeodeticCoord,
}

struct Candidate {
    seq: u64,
    t_s: f64,
    enu: Vector3<f64>,
    pixel: PixelCoord,
}

pub fn generate_cell(cfg: &ScenarioConfig, noise: &NoiseModel, cell: &CellKey) -> Result<Vec<TruthFrame>, SimError> {
    cfg.validate()?;
    noise.validate()?;
    let infeasible = |reason: String| SimError::InfeasibleScenario {
        cell: cell.label(),
        reason,
    };

    let frame = EnuFrame::new(cfg.mission_origin);
    let intr = cfg.intrinsics;
    let truth_poi = cfg.ground_truth_poi()?;
    let poi_enu = frame.to_enu(&truth_poi);
    let cam_up = cfg.ground_alt_m - cfg.mission_origin.alt_m() + cell.altitude_m;
    let orientation = pose_from_gimbal(cfg.heading_deg, cell.pitch_deg);

    let (sin_h, cos_h) = cfg.heading_deg.to_radians().sin_cos();
    let along = Vector3::new(sin_h, cos_h, 0.0);
    let across = Vector3::new(cos_h, -sin_h, 0.0);

    let pitch = cell.pitch_deg.to_radians();
    let half_vfov = intr.vfov_deg().to_radians() / 2.0;
    let half_hfov = intr.hfov_deg.to_radians() / 2.0;
    // Along-track camera position (relative to the POI) that puts the POI on the boresight.
    let s_center = -cell.altitude_m * pitch.cos() / pitch.sin();
    let far = cell.altitude_m / (pitch - half_vfov).max(5f64.to_radians()).tan();
    let behind = cell.altitude_m * (pitch + half_vfov - std::f64::consts::FRAC_PI_2).clamp(0.0, 80f64.to_radians()).tan();
    let slant = cell.altitude_m / pitch.sin();
    let max_offset = 0.8 * slant * half_hfov.tan();

    let ds = cell.velocity_mps / cfg.fps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(cell.index as u64);

    let wanted = (3 * cfg.frames_per_cell).max(cfg.frames_per_cell + 20);
    // Each pass sweeps a single image column, so spread needs several passes.
    let min_passes = 1 + cfg.frames_per_cell.div_ceil(2);
    let max_passes = 64 + 4 * cfg.frames_per_cell;
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut seq: u64 = 0;
    let mut clock_s = 0.0;
    let mut boresight = None;

    for pass in 0..max_passes {
        if candidates.len() >= wanted && pass >= min_passes {
            break;
        }
        let (offset, phase) = if pass == 0 {
            (0.0, 0.0)
        } else {
            (rng.random_range(-max_offset..=max_offset), rng.random_range(0.0..ds))
        };
        let s_lo = -far - offset.abs() - 5.0;
        let s_hi = behind + offset.abs() + 5.0;
        let j_lo = ((s_lo - s_center - phase) / ds).floor() as i64;
        let j_hi = ((s_hi - s_center - phase) / ds).ceil() as i64;
        for j in j_lo..=j_hi {
            let s = s_center + phase + j as f64 * ds;
            let mut enu = poi_enu + across * offset + along * s;
            enu.z = cam_up;
            let pose = CameraPose {
                position: frame.from_enu(&enu)?,
                orientation,
            };
            let t_s = clock_s + (j - j_lo) as f64 / cfg.fps;
            if let Ok(p) = project_in(&frame, &pose, &intr, &truth_poi) {
                if p.in_frame {
                    if pass == 0 && j == 0 {
                        boresight = Some(candidates.len());
                    }
                    candidates.push(Candidate {
                        seq,
                        t_s,
                        enu,
                        pixel: p.pixel,
                    });
                }
            }
            seq += 1;
        }
        clock_s += (j_hi - j_lo + 1) as f64 / cfg.fps + PASS_GAP_S;
        if pass == 0 && boresight.is_none() {
            return Err(infeasible("POI never enters the field of view".into()));
        }
    }
    if candidates.len() < cfg.frames_per_cell {
        return Err(infeasible(format!(
            "only {} frames see the POI, {} requested",
            candidates.len(),
            cfg.frames_per_cell
        )));
    }

    // Slot targets and per-slot noise come from streams shared by every cell,
    // so cells differ only in flight geometry (common random numbers).
    let mut targets = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    targets.set_stream(TARGET_STREAM);
    let chosen = select_spread(
        &candidates,
        boresight.expect("checked after the first pass"),
        cfg.frames_per_cell,
        MIN_SPACING_FRAC * intr.width_px as f64,
        &intr,
        &mut targets,
    );

    let base_ms = EPOCH_MS + cell.index as u64 * 3_600_000;
    let uav_id = format!("uav-{}", cell.label());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    noise_rng.set_stream(NOISE_STREAM);
    let mut out = Vec::with_capacity(chosen.len());
    for idx in chosen {
        let c = &candidates[idx];
        let truth_pose = CameraPose {
            position: frame.from_enu(&c.enu)?,
            orientation,
        };
        let (position, orientation_noisy, click) = if noise.is_zero() {
            (truth_pose.position, orientation, c.pixel)
        } else {
            let pos = frame.from_enu(&(c.enu + noise.sample_position_offset(&mut noise_rng)))?;
            let q = Quaternion::from_unit(&(orientation.to_unit() * noise.sample_orientation_error(&mut noise_rng)));
            let (du, dv) = noise.sample_pixel_offset(&mut noise_rng);
            (pos, q, PixelCoord::new(c.pixel.u + du, c.pixel.v + dv))
        };
        out.push(TruthFrame {
            meta: FrameMeta {
                uav_id: uav_id.clone(),
                seq: c.seq,
                t_ms: base_ms + (c.t_s * 1000.0).round() as u64,
                pose: CameraPose {
                    position,
                    orientation: orientation_noisy,
                },
                intr,
            },
            truth_pose,
            truth_pixel: c.pixel,
            click_pixel: click,
            truth_poi,
        });
    }
    out.sort_by_key(|f| f.meta.seq);
    Ok(out)
}

/// Picks `count` candidates, always including `first` (the boresight frame),
/// preferring random candidates at least `min_dist` px from every pick, and
/// filling any shortfall by farthest-point sampling. Returns indices in
/// ascending (time) order.
/// Picks `count` candidates, starting with `first`, keeping truth pixels at
/// least `min_dist` apart. Each slot takes the eligible candidate nearest to a
/// target point drawn from `targets`; farthest-point fill covers the rest when
/// spacing cannot be met. Returned in slot order.
fn select_spread(
    cands: &[Candidate],
    first: usize,
    count: usize,
    min_dist: f64,
    intr: &CameraIntrinsics,
    targets: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut chosen = vec![first];
    let mut used = vec![false; cands.len()];
    used[first] = true;
    let mut nearest: Vec<f64> = cands.iter().map(|c| c.pixel.distance(&cands[first].pixel)).collect();
    let take = |i: usize, chosen: &mut Vec<usize>, used: &mut Vec<bool>, nearest: &mut Vec<f64>| {
        chosen.push(i);
        used[i] = true;
        for (j, c) in cands.iter().enumerate() {
            nearest[j] = nearest[j].min(c.pixel.distance(&cands[i].pixel));
        }
    };

    while chosen.len() < count {
        let target = PixelCoord::new(
            targets.random_range(0.0..intr.width_px as f64),
            targets.random_range(0.0..intr.height_px as f64),
        );
        let pick = (0..cands.len())
            .filter(|&j| !used[j] && nearest[j] >= min_dist)
            .min_by(|&a, &b| {
                cands[a].pixel.distance(&target).total_cmp(&cands[b].pixel.distance(&target)).then(a.cmp(&b))
            });
        match pick {
            Some(i) => take(i, &mut chosen, &mut used, &mut nearest),
            None => break,
        }
    }
    while chosen.len() < count {
        let best = (0..cands.len())
            .filter(|&j| !used[j])
            .max_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(b.cmp(&a)))
            .expect("enough candidates checked by caller");
        take(best, &mut chosen, &mut used, &mut nearest);
    }
    chosen
}

/// One generated cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub key: CellKey,
    pub frames: Vec<TruthFrame>,
}

/// The full generated experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOutput {
    pub config: ScenarioConfig,
    pub noise: NoiseModel,
    pub cells: Vec<CellOutput>,
}

impl GridOutput {
    pub fn frame_count(&self) -> usize {
        self.cells.iter().map(|c| c.frames.len()).sum()
    }
}

/// Generates every cell. Cells are independent and run on scoped threads;
/// each cell's RNG stream depends only on `(rng_seed, cell index)`.
pub fn generate_grid(cfg: &ScenarioConfig, noise: &NoiseModel) -> Result<GridOutput, SimError> {
    cfg.validate()?;
    noise.validate()?;
    let keys = cfg.cells();
    let results = crate::par::map(&keys, |key| generate_cell(cfg, noise, key));
    let cells = keys
        .into_iter()
        .zip(results)
        .map(|(key, r)| r.map(|frames| CellOutput { key, frames }))
        .collect::<Result<_, _>>()?;
    Ok(GridOutput {
        config: cfg.clone(),
        noise: *noise,
        cells,
    })
}

/// Per-frame line of a `.truth` file: the delivered telemetry keys followed
/// by the cell parameters and the noiseless truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    #[serde(flatten)]
    pub telemetry: TelemetryRecord,
    pub altitude_m: f64,
    pub pitch_deg: f64,
    pub velocity_mps: f64,
    pub truth_lat_deg: f64,
    pub truth_lon_deg: f64,
    pub truth_alt_m: f64,
    pub truth_u_px: f64,
    pub truth_v_px: f64,
    pub click_u_px: f64,
    pub click_v_px: f64,
    pub truth_cam_lat_deg: f64,
    pub truth_cam_lon_deg: f64,
    pub truth_cam_alt_m: f64,
    pub truth_qw: f64,
    pub truth_qx: f64,
    pub truth_qy: f64,
    pub truth_qz: f64,
}

impl TruthRecord {
    pub fn new(key: &CellKey, f: &TruthFrame) -> Self {
        let [truth_qw, truth_qx, truth_qy, truth_qz] = f.truth_pose.orientation.components();
        Self {
            telemetry: TelemetryRecord::from(&f.meta),
            altitude_m: key.altitude_m,
            pitch_deg: key.pitch_deg,
            velocity_mps: key.velocity_mps,
            truth_lat_deg: f.truth_poi.lat_deg(),
            truth_lon_deg: f.truth_poi.lon_deg(),
            truth_alt_m: f.truth_poi.alt_m(),
            truth_u_px: f.truth_pixel.u,
            truth_v_px: f.truth_pixel.v,
            click_u_px: f.click_pixel.u,
            click_v_px: f.click_pixel.v,
            truth_cam_lat_deg: f.truth_pose.position.lat_deg(),
            truth_cam_lon_deg: f.truth_pose.position.lon_deg(),
            truth_cam_alt_m: f.truth_pose.position.alt_m(),
            truth_qw,
            truth_qx,
            truth_qy,
            truth_qz,
        }
    }

    pub fn into_frame(self) -> Result<TruthFrame, String> {
        let meta = FrameMeta::try_from(self.telemetry).map_err(|e| e.to_string())?;
        let geo = |lat, lon, alt| GeodeticCoord::new(lat, lon, alt).map_err(|e| e.to_string());
        Ok(TruthFrame {
            meta,
            truth_pose: CameraPose {
                position: geo(self.truth_cam_lat_deg, self.truth_cam_lon_deg, self.truth_cam_alt_m)?,
                orientation: Quaternion::new(self.truth_qw, self.truth_qx, self.truth_qy, self.truth_qz)
                    .map_err(|e| e.to_string())?,
            },
            truth_pixel: PixelCoord::new(self.truth_u_px, self.truth_v_px),
            click_pixel: PixelCoord::new(self.click_u_px, self.click_v_px),
            truth_poi: geo(self.truth_lat_deg, self.truth_lon_deg, self.truth_alt_m)?,
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "poiloc-grid";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ScenarioConfig,
    pub noise: NoiseModel,
    pub cells: Vec<ManifestCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCell {
    pub label: String,
    #[serde(flatten)]
    pub key: CellKey,
    pub frames: usize,
    /// Paths relative to the manifest's directory.
    pub telemetry: PathBuf,
    pub truth: PathBuf,
}

/// Writes `manifest.json` plus `cells/<label>.telem` and `cells/<label>.truth`
/// under `dir`. Returns the manifest path.
pub fn write_grid(dir: &Path, grid: &GridOutput) -> Result<PathBuf, SimError> {
    let cells_dir = dir.join("cells");
    fs::create_dir_all(&cells_dir).map_err(io_err(&cells_dir))?;
    let mut manifest_cells = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let label = cell.key.label();
        let telem_rel = PathBuf::from("cells").join(format!("{label}.telem"));
        let truth_rel = PathBuf::from("cells").join(format!("{label}.truth"));

        let telem_path = dir.join(&telem_rel);
        let file = fs::File::create(&telem_path).map_err(io_err(&telem_path))?;
        let mut w = TelemetryWriter::new(BufWriter::new(file));
        for f in &cell.frames {
            w.write(&f.meta).map_err(io_err(&telem_path))?;
        }
        w.flush().map_err(io_err(&telem_path))?;

        let truth_path = dir.join(&truth_rel);
        let file = fs::File::create(&truth_path).map_err(io_err(&truth_path))?;
        let mut w = BufWriter::new(file);
        for f in &cell.frames {
            let line = serde_json::to_string(&TruthRecord::new(&cell.key, f)).expect("truth record serializes");
            writeln!(w, "{line}").map_err(io_err(&truth_path))?;
        }
        w.flush().map_err(io_err(&truth_path))?;

        manifest_cells.push(ManifestCell {
            label,
            key: cell.key,
            frames: cell.frames.len(),
            telemetry: telem_rel,
            truth: truth_rel,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        config: grid.config.clone(),
        noise: grid.noise,
        cells: manifest_cells,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}

/// Loads a grid written by [`write_grid`] from its directory.
pub fn load_grid(dir: &Path) -> Result<GridOutput, SimError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(SimError::MissingTruth(format!("no {} in {}", MANIFEST_FILE, dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SimError::CorruptGrid {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(SimError::CorruptGrid {
            path: path.display().to_string(),
            reason: format!("unexpected format {:?}", manifest.format),
        });
    }
    let mut cells = Vec::with_capacity(manifest.cells.len());
    for mc in &manifest.cells {
        let truth_path = dir.join(&mc.truth);
        if !truth_path.is_file() {
            return Err(SimError::MissingTruth(truth_path.display().to_string()));
        }
        let reader = BufReader::new(fs::File::open(&truth_path).map_err(io_err(&truth_path))?);
        let mut frames = Vec::with_capacity(mc.frames);
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(&truth_path))?;
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |reason: String| SimError::CorruptGrid {
                path: truth_path.display().to_string(),
                reason: format!("line {}: {reason}", n + 1),
            };
            let rec: TruthRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
            frames.push(rec.into_frame().map_err(corrupt)?);
        }
        cells.push(CellOutput { key: mc.key, frames });
    }
    Ok(GridOutput {
        config: manifest.config,
        noise: manifest.noise,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::geodesic_distance;
    use crate::projection::geolocate;

    fn cell(cfg: &ScenarioConfig, alt: f64, pitch: f64, vel: f64) -> CellKey {
        *cfg.cells()
            .iter()
            .find(|k| k.altitude_m == alt && k.pitch_deg == pitch && k.velocity_mps == vel)
            .unwrap()
    }

    #[test]
    fn nadir_closest_approach_hits_principal_point() {
        let cfg = ScenarioConfig::default();
        let key = cell(&cfg, 10.0, 90.0, 15.0);
        let frames = generate_cell(&cfg, &NoiseModel::zero(), &key).unwrap();
        let frame = EnuFrame::new(cfg.mission_origin);
        let poi = frame.to_enu(&frames[0].truth_poi);
        let closest = frames
            .iter()
            .min_by(|a, b| {
                let da = (frame.to_enu(&a.truth_pose.position) - poi).xy().norm();
                let db = (frame.to_enu(&b.truth_pose.position) - poi).xy().norm();
                da.total_cmp(&db)
            })
            .unwrap();
        let pp = cfg.intrinsics.principal_point();
        assert!(closest.truth_pixel.distance(&pp) < 0.5, "{:?}", closest.truth_pixel);
    }

    #[test]
    fn every_cell_has_exact_frame_count_and_spread() {
        let cfg = ScenarioConfig::default();
        let grid = generate_grid(&cfg, &NoiseModel::default()).unwrap();
        assert_eq!(grid.cells.len(), 36);
        assert_eq!(grid.frame_count(), 360);
        let min_gap = MIN_SPACING_FRAC * cfg.intrinsics.width_px as f64;
        for c in &grid.cells {
            assert_eq!(c.frames.len(), 10, "{}", c.key.label());
            for (i, a) in c.frames.iter().enumerate() {
                assert!(cfg.intrinsics.contains(&a.truth_pixel));
                for b in &c.frames[i + 1..] {
                    assert!(a.truth_pixel.distance(&b.truth_pixel) >= min_gap, "{}", c.key.label());
                }
            }
            let seqs: Vec<_> = c.frames.iter().map(|f| f.meta.seq).collect();
            assert!(seqs.windows(2).all(|w| w[0] < w[1]));
            assert!(c.frames.windows(2).all(|w| w[0].meta.t_ms <= w[1].meta.t_ms));
        }
    }

    #[test]
    fn noiseless_frames_close_through_geolocation() {
        let cfg = ScenarioConfig::default();
        let grid = generate_grid(&cfg, &NoiseModel::zero()).unwrap();
        for c in &grid.cells {
            for f in &c.frames {
                assert_eq!(f.meta.pose, f.truth_pose);
                assert_eq!(f.click_pixel, f.truth_pixel);
                let g = geolocate(&f.truth_pose, &f.meta.intr, &f.truth_pixel, &cfg.ground_model(), &cfg.mission_origin)
                    .unwrap();
                let err = (g.to_ecef().to_vector() - f.truth_poi.to_ecef().to_vector()).norm();
                assert!(err < 1e-6, "{}: {err}", c.key.label());
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let cfg = ScenarioConfig {
            rng_seed: 99,
            ..Default::default()
        };
        let a = generate_grid(&cfg, &NoiseModel::default()).unwrap();
        let b = generate_grid(&cfg, &NoiseModel::default()).unwrap();
        assert_eq!(a, b);
        let other = generate_grid(&ScenarioConfig { rng_seed: 100, ..cfg }, &NoiseModel::default()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn noise_only_touches_delivered_fields() {
        let cfg = ScenarioConfig::default();
        let key = cell(&cfg, 20.0, 60.0, 10.0);
        let clean = generate_cell(&cfg, &NoiseModel::zero(), &key).unwrap();
        let noisy = generate_cell(&cfg, &NoiseModel::default(), &key).unwrap();
        for (c, n) in clean.iter().zip(&noisy) {
            assert_eq!(c.truth_pose, n.truth_pose);
            assert_eq!(c.truth_pixel, n.truth_pixel);
            assert_eq!(c.truth_poi, n.truth_poi);
            assert_ne!(c.meta.pose, n.meta.pose);
            assert_ne!(c.click_pixel, n.click_pixel);
        }
    }

    #[test]
    fn cells_share_per_slot_noise() {
        let cfg = ScenarioConfig::default();
        let grid = generate_grid(&cfg, &NoiseModel::default()).unwrap();
        let frame = EnuFrame::new(cfg.mission_origin);
        let pp = cfg.intrinsics.principal_point();
        let offsets: Vec<_> = grid
            .cells
            .iter()
            .map(|c| {
                let f = c.frames.iter().find(|f| f.truth_pixel.distance(&pp) < 0.5).unwrap();
                let d = frame.to_enu(&f.meta.pose.position) - frame.to_enu(&f.truth_pose.position);
                (d, f.click_pixel.u - f.truth_pixel.u)
            })
            .collect();
        for (d, du) in &offsets[1..] {
            assert!((d - offsets[0].0).norm() < 1e-6, "{d:?} vs {:?}", offsets[0].0);
            assert_eq!(*du, offsets[0].1);
        }
    }

    #[test]
    fn gps_noise_is_unbiased() {
        let noise = NoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let sum = (0..n).fold(Vector3::zeros(), |acc, _| acc + noise.sample_position_offset(&mut rng));
        let mean = sum / n as f64;
        let bound = |s: f64| 3.0 * s / (n as f64).sqrt();
        assert!(mean.x.abs() < bound(noise.gps_sigma_m), "{mean:?}");
        assert!(mean.y.abs() < bound(noise.gps_sigma_m), "{mean:?}");
        assert!(mean.z.abs() < bound(noise.alt_sigma_m), "{mean:?}");
    }

    #[test]
    fn config_validation() {
        let base = ScenarioConfig::default();
        assert!(ScenarioConfig { frames_per_cell: 0, ..base.clone() }.validate().is_err());
        assert!(ScenarioConfig { altitudes_m: vec![], ..base.clone() }.validate().is_err());
        assert!(ScenarioConfig { altitudes_m: vec![0.0], ..base.clone() }.validate().is_err());
        assert!(ScenarioConfig { pitches_deg: vec![0.0], ..base.clone() }.validate().is_err());
        assert!(ScenarioConfig { pitches_deg: vec![91.0], ..base.clone() }.validate().is_err());
        assert!(ScenarioConfig { fps: 0.0, ..base.clone() }.validate().is_err());
        assert!(NoiseModel { gps_sigma_m: -1.0, ..NoiseModel::zero() }.validate().is_err());
        assert!(generate_grid(&ScenarioConfig { frames_per_cell: 0, ..base }, &NoiseModel::zero()).is_err());
    }

    #[test]
    fn single_cell_grid() {
        let cfg = ScenarioConfig {
            altitudes_m: vec![20.0],
            pitches_deg: vec![75.0],
            velocities_mps: vec![10.0],
            ..Default::default()
        };
        let grid = generate_grid(&cfg, &NoiseModel::zero()).unwrap();
        assert_eq!(grid.cells.len(), 1);
        assert_eq!(grid.cells[0].key.label(), "a20_p75_v10");
    }

    #[test]
    fn large_cells_still_fill() {
        let cfg = ScenarioConfig {
            altitudes_m: vec![10.0],
            pitches_deg: vec![45.0, 90.0],
            velocities_mps: vec![15.0],
            frames_per_cell: 200,
            ..Default::default()
        };
        let grid = generate_grid(&cfg, &NoiseModel::default()).unwrap();
        assert!(grid.cells.iter().all(|c| c.frames.len() == 200));
    }

    #[test]
    fn grid_files_round_trip() {
        let cfg = ScenarioConfig {
            altitudes_m: vec![10.0, 30.0],
            pitches_deg: vec![60.0],
            velocities_mps: vec![5.0],
            ..Default::default()
        };
        let grid = generate_grid(&cfg, &NoiseModel::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_grid(dir.path(), &grid).unwrap();
        assert_eq!(load_grid(dir.path()).unwrap(), grid);

        let telem = fs::read_to_string(dir.path().join("cells/a10_p60_v5.telem")).unwrap();
        assert_eq!(telem.lines().count(), 10);

        fs::remove_file(dir.path().join("cells/a30_p60_v5.truth")).unwrap();
        assert!(matches!(load_grid(dir.path()), Err(SimError::MissingTruth(_))));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_grid(empty.path()), Err(SimError::MissingTruth(_))));
    }

    #[test]
    fn truth_pixels_match_geodesic_geometry() {
        // Independent check on one nadir frame: ground offset of the POI from
        // the sub-camera point equals altitude · pixel offset / focal length.
        let cfg = ScenarioConfig::default();
        let key = cell(&cfg, 30.0, 90.0, 5.0);
        let frames = generate_cell(&cfg, &NoiseModel::zero(), &key).unwrap();
        let f = frames.iter().max_by(|a, b| a.truth_pixel.v.total_cmp(&b.truth_pixel.v)).unwrap();
        let sub = f.truth_pose.position.with_alt(cfg.ground_alt_m).unwrap();
        let d = geodesic_distance(&sub, &f.truth_poi).unwrap();
        let pp = cfg.intrinsics.principal_point();
        let expected = 30.0 * f.truth_pixel.distance(&pp) / cfg.intrinsics.fx();
        assert!((d - expected).abs() < 5e-3, "{d} vs {expected}");
    }
}
