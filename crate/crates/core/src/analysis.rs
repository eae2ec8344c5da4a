//! Accuracy harnesses over a generated grid and their CSV outputs.
//!
//! Every truth frame is evaluated twice:
//! * geolocation: the noisy click is cast through the noisy telemetry and
//!   compared with the true POI by geodesic distance;
//! * marker: a marker placed at the POI is reprojected through the noisy
//!   telemetry and compared with where the POI really appears. When the
//!   marker disc and the projected whiteboard overlap the distance is zero.
//!
//! Velocity is kept on every record but never used as a summary grouping.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{geodesic_distance, EnuFrame, GeodeticCoord};
use crate::projection::{geolocate_in, project_in, CameraIntrinsics, CameraPose, GroundModel, PixelCoord};
use crate::simkit::{GridOutput, SimError, TruthFrame};

/// Whiteboard used as the physical POI (3 ft × 4 ft), east × north extent.
pub const WHITEBOARD_SIZE_M: (f64, f64) = (0.91, 1.22);
pub const DEFAULT_MARKER_RADIUS_PX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("missing truth data: {0}")]
    MissingTruth(String),
    #[error(transparent)]
    Grid(SimError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<SimError> for AnalysisError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::MissingTruth(m) => AnalysisError::MissingTruth(m),
            other => AnalysisError::Grid(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub altitude_m: f64,
    pub pitch_deg: f64,
    pub velocity_mps: f64,
    pub frame_seq: u64,
    /// Geodesic distance between computed and true POI position.
    pub horiz_err_m: f64,
    /// Marker-to-POI pixel distance, zero when the two overlap.
    pub pixel_dist_px: f64,
}

/// Where the reprojected marker is anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerPlacement {
    /// Fixed at the surveyed POI position.
    #[default]
    Truth,
    /// At the position geolocated from the frame's own click.
    Computed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyOptions {
    /// Defaults to the grid's local ground plane.
    pub ground: Option<GroundModel>,
    pub marker_radius_px: f64,
    pub poi_size_m: (f64, f64),
    pub placement: MarkerPlacement,
}

impl Default for AccuracyOptions {
    fn default() -> Self {
        Self {
            ground: None,
            marker_radius_px: DEFAULT_MARKER_RADIUS_PX,
            poi_size_m: WHITEBOARD_SIZE_M,
            placement: MarkerPlacement::Truth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Altitude,
    Pitch,
}

impl Grouping {
    pub fn as_str(&self) -> &'static str {
        match self {
            Grouping::Altitude => "altitude",
            Grouping::Pitch => "pitch",
        }
    }

    fn key(&self, r: &AccuracyRecord) -> f64 {
        match self {
            Grouping::Altitude => r.altitude_m,
            Grouping::Pitch => r.pitch_deg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    HorizErrM,
    PixelDistPx,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::HorizErrM => "horiz_err_m",
            Metric::PixelDistPx => "pixel_dist_px",
        }
    }

    fn value(&self, r: &AccuracyRecord) -> f64 {
        match self {
            Metric::HorizErrM => r.horiz_err_m,
            Metric::PixelDistPx => r.pixel_dist_px,
        }
    }
}

/// Mean horizontal errors measured in the original field trials, shown next
/// to simulated results for comparison only.
pub fn field_reference_mean_m(grouping: Grouping, key: f64) -> Option<f64> {
    let table: &[(f64, f64)] = match grouping {
        Grouping::Altitude => &[(10.0, 1.3), (20.0, 2.5), (30.0, 2.9)],
        Grouping::Pitch => &[(45.0, 3.6), (60.0, 2.2), (75.0, 1.8), (90.0, 1.5)],
    };
    table.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub metric: Metric,
    pub grouping: Grouping,
    pub key: f64,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (zero for a single value).
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// A frame that could not be evaluated, e.g. a noisy click above the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFailure {
    pub cell: String,
    pub frame_seq: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub metric: Metric,
    pub records: Vec<AccuracyRecord>,
    pub by_altitude: Vec<CellSummary>,
    pub by_pitch: Vec<CellSummary>,
    pub failures: Vec<FrameFailure>,
}

impl AccuracyReport {
    pub fn summaries(&self) -> impl Iterator<Item = &CellSummary> {
        self.by_altitude.iter().chain(&self.by_pitch)
    }

    pub fn mean_for(&self, grouping: Grouping, key: f64) -> Option<f64> {
        self.summaries()
            .find(|s| s.grouping == grouping && s.key == key)
            .map(|s| s.mean)
    }
}

/// Pixel distance with the overlap rule: zero whenever the marker disc and
/// the POI's projected extent touch or overlap.
pub fn marker_pixel_distance(marker: &PixelCoord, marker_radius_px: f64, poi: &PixelCoord, poi_radius_px: f64) -> f64 {
    let d = marker.distance(poi);
    if d <= marker_radius_px + poi_radius_px {
        0.0
    } else {
        d
    }
}

/// Projected half-diagonal of a ground rectangle centered on `poi`: the
/// largest pixel distance from the POI center to any visible corner.
pub fn poi_extent_radius_px(
    frame: &EnuFrame,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    poi: &GeodeticCoord,
    size_m: (f64, f64),
) -> f64 {
    let Ok(center) = project_in(frame, pose, intr, poi) else {
        return 0.0;
    };
    let c = frame.to_enu(poi);
    let (he, hn) = (size_m.0 / 2.0, size_m.1 / 2.0);
    [(-he, -hn), (-he, hn), (he, -hn), (he, hn)]
        .into_iter()
        .filter_map(|(de, dn)| frame.from_enu(&(c + Vector3::new(de, dn, 0.0))).ok())
        .filter_map(|corner| project_in(frame, pose, intr, &corner).ok())
        .map(|p| p.pixel.distance(&center.pixel))
        .fold(0.0, f64::max)
}

fn evaluate_frame(
    frame: &EnuFrame,
    ground: &GroundModel,
    opts: &AccuracyOptions,
    f: &TruthFrame,
) -> Result<(f64, f64), String> {
    let intr = &f.meta.intr;
    let computed = geolocate_in(frame, &f.meta.pose, intr, &f.click_pixel, ground).map_err(|e| e.to_string())?;
    let horiz_err = geodesic_distance(&computed, &f.truth_poi).map_err(|e| e.to_string())?;

    let anchor = match opts.placement {
        MarkerPlacement::Truth => f.truth_poi,
        MarkerPlacement::Computed => computed,
    };
    let marker = project_in(frame, &f.meta.pose, intr, &anchor).map_err(|e| format!("marker: {e}"))?;
    let poi_radius = poi_extent_radius_px(frame, &f.truth_pose, intr, &f.truth_poi, opts.poi_size_m);
    let pixel_dist = marker_pixel_distance(&marker.pixel, opts.marker_radius_px, &f.truth_pixel, poi_radius);
    Ok((horiz_err, pixel_dist))
}

/// Evaluates both metrics on every frame of the grid, cells in parallel.
pub fn evaluate_grid(grid: &GridOutput, opts: &AccuracyOptions) -> (Vec<AccuracyRecord>, Vec<FrameFailure>) {
    let frame = EnuFrame::new(grid.config.mission_origin);
    let ground = opts.ground.unwrap_or_else(|| grid.config.ground_model());
    let per_cell = crate::par::map(&grid.cells, |cell| {
        let mut records = Vec::with_capacity(cell.frames.len());
        let mut failures = Vec::new();
        for f in &cell.frames {
            match evaluate_frame(&frame, &ground, opts, f) {
                Ok((horiz_err_m, pixel_dist_px)) => records.push(AccuracyRecord {
                    altitude_m: cell.key.altitude_m,
                    pitch_deg: cell.key.pitch_deg,
                    velocity_mps: cell.key.velocity_mps,
                    frame_seq: f.meta.seq,
                    horiz_err_m,
                    pixel_dist_px,
                }),
                Err(reason) => failures.push(FrameFailure {
                    cell: cell.key.label(),
                    frame_seq: f.meta.seq,
                    reason,
                }),
            }
        }
        (records, failures)
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_cell {
        records.extend(r);
        failures.extend(f);
    }
    (records, failures)
}

fn report(metric: Metric, (records, failures): (Vec<AccuracyRecord>, Vec<FrameFailure>)) -> AccuracyReport {
    AccuracyReport {
        metric,
        by_altitude: summarize(&records, Grouping::Altitude, metric),
        by_pitch: summarize(&records, Grouping::Pitch, metric),
        records,
        failures,
    }
}

pub fn run_geolocation_accuracy(grid: &GridOutput, opts: &AccuracyOptions) -> AccuracyReport {
    report(Metric::HorizErrM, evaluate_grid(grid, opts))
}

pub fn run_marker_accuracy(grid: &GridOutput, opts: &AccuracyOptions) -> AccuracyReport {
    report(Metric::PixelDistPx, evaluate_grid(grid, opts))
}

/// Loads a grid directory and runs both harnesses.
pub fn run_accuracy_from_dir(
    dir: &Path,
    opts: &AccuracyOptions,
) -> Result<(AccuracyReport, AccuracyReport), AnalysisError> {
    let grid = crate::simkit::load_grid(dir)?;
    Ok((run_geolocation_accuracy(&grid, opts), run_marker_accuracy(&grid, opts)))
}

/// Per-group statistics, sorted by ascending key.
pub fn summarize(records: &[AccuracyRecord], grouping: Grouping, metric: Metric) -> Vec<CellSummary> {
    let mut keys: Vec<f64> = records.iter().map(|r| grouping.key(r)).collect();
    keys.sort_by(f64::total_cmp);
    keys.dedup();
    keys.into_iter()
        .map(|key| {
            let mut xs: Vec<f64> = records
                .iter()
                .filter(|r| grouping.key(r) == key)
                .map(|r| metric.value(r))
                .collect();
            xs.sort_by(f64::total_cmp);
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let median = if n % 2 == 1 {
                xs[n / 2]
            } else {
                (xs[n / 2 - 1] + xs[n / 2]) / 2.0
            };
            let std = if n > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            CellSummary {
                metric,
                grouping,
                key,
                n,
                mean,
                median,
                std,
                min: xs[0],
                max: xs[n - 1],
            }
        })
        .collect()
}

pub const RECORDS_HEADER: [&str; 6] = [
    "altitude_m",
    "pitch_deg",
    "velocity_mps",
    "frame_seq",
    "horiz_err_m",
    "pixel_dist_px",
];

pub const SUMMARY_HEADER: [&str; 10] = [
    "metric",
    "grouping",
    "key",
    "n",
    "mean",
    "median",
    "std",
    "min",
    "max",
    "field_reference_mean",
];

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), AnalysisError> {
    let io = |source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_io = |e: csv::Error| std::io::Error::other(e.to_string());
    w.write_record(header).map_err(to_io).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(to_io).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string())).map_err(io)?;
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&bytes).map_err(io)
}

/// Writes one row per record with [`RECORDS_HEADER`] columns.
pub fn emit_csv(records: &[AccuracyRecord], path: &Path) -> Result<(), AnalysisError> {
    write_csv(
        path,
        &RECORDS_HEADER,
        records.iter().map(|r| {
            vec![
                r.altitude_m.to_string(),
                r.pitch_deg.to_string(),
                r.velocity_mps.to_string(),
                r.frame_seq.to_string(),
                r.horiz_err_m.to_string(),
                r.pixel_dist_px.to_string(),
            ]
        }),
    )
}

/// Writes one row per summary with [`SUMMARY_HEADER`] columns. The field
/// reference column is only filled for the horizontal-error metric.
pub fn emit_summary<'a>(summaries: impl IntoIterator<Item = &'a CellSummary>, path: &Path) -> Result<(), AnalysisError> {
    write_csv(
        path,
        &SUMMARY_HEADER,
        summaries.into_iter().map(|s| {
            let reference = match s.metric {
                Metric::HorizErrM => field_reference_mean_m(s.grouping, s.key).map(|v| v.to_string()),
                Metric::PixelDistPx => None,
            };
            vec![
                s.metric.as_str().to_string(),
                s.grouping.as_str().to_string(),
                s.key.to_string(),
                s.n.to_string(),
                s.mean.to_string(),
                s.median.to_string(),
                s.std.to_string(),
                s.min.to_string(),
                s.max.to_string(),
                reference.unwrap_or_default(),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::{generate_grid, NoiseModel, ScenarioConfig};

    fn rec(alt: f64, pitch: f64, err: f64) -> AccuracyRecord {
        AccuracyRecord {
            altitude_m: alt,
            pitch_deg: pitch,
            velocity_mps: 5.0,
            frame_seq: 0,
            horiz_err_m: err,
            pixel_dist_px: 2.0 * err,
        }
    }

    #[test]
    fn pixel_distance_rules() {
        let o = PixelCoord::new(0.0, 0.0);
        let p = PixelCoord::new(3.0, 4.0);
        assert_eq!(marker_pixel_distance(&o, 0.0, &p, 0.0), 5.0);
        assert_eq!(marker_pixel_distance(&o, 1.0, &p, 1.0), 5.0);
        assert_eq!(marker_pixel_distance(&o, 3.0, &p, 2.5), 0.0);
        assert_eq!(marker_pixel_distance(&o, 10.0, &PixelCoord::new(30.0, 0.0), 25.0), 0.0);
        assert_eq!(marker_pixel_distance(&o, 10.0, &PixelCoord::new(40.0, 0.0), 25.0), 40.0);
    }

    #[test]
    fn summaries_are_sorted_and_consistent() {
        let records = [rec(20.0, 45.0, 3.0), rec(10.0, 45.0, 1.0), rec(10.0, 90.0, 2.0), rec(10.0, 90.0, 6.0)];
        let s = summarize(&records, Grouping::Altitude, Metric::HorizErrM);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].key, s[0].n, s[0].mean, s[0].median, s[0].min, s[0].max), (10.0, 3, 3.0, 2.0, 1.0, 6.0));
        assert!((s[0].std - 7f64.sqrt()).abs() < 1e-12);
        assert_eq!((s[1].key, s[1].n, s[1].std), (20.0, 1, 0.0));

        let p = summarize(&records, Grouping::Pitch, Metric::PixelDistPx);
        assert_eq!(p.iter().map(|s| s.key).collect::<Vec<_>>(), [45.0, 90.0]);
        assert_eq!(p[1].median, 8.0);
    }

    #[test]
    fn zero_noise_grid_has_zero_error() {
        let grid = generate_grid(&ScenarioConfig::default(), &NoiseModel::zero()).unwrap();
        for placement in [MarkerPlacement::Truth, MarkerPlacement::Computed] {
            let opts = AccuracyOptions {
                placement,
                ..Default::default()
            };
            let geo = run_geolocation_accuracy(&grid, &opts);
            assert!(geo.failures.is_empty());
            assert_eq!(geo.records.len(), 360);
            assert!(geo.records.iter().all(|r| r.horiz_err_m < 1e-6));
            let marker = run_marker_accuracy(&grid, &opts);
            assert!(marker.records.iter().all(|r| r.pixel_dist_px == 0.0));
            assert_eq!(marker.by_altitude.len(), 3);
            assert_eq!(marker.by_pitch.len(), 4);
        }
    }

    #[test]
    fn whiteboard_extent_shrinks_with_altitude() {
        let cfg = ScenarioConfig::default();
        let frame = EnuFrame::new(cfg.mission_origin);
        let poi = cfg.ground_truth_poi().unwrap();
        let radius = |alt: f64| {
            let pose = CameraPose {
                position: poi.with_alt(cfg.ground_alt_m + alt).unwrap(),
                orientation: crate::projection::pose_from_gimbal(0.0, 90.0),
            };
            poi_extent_radius_px(&frame, &pose, &cfg.intrinsics, &poi, WHITEBOARD_SIZE_M)
        };
        // Nadir half-diagonal: fx · hypot(0.455, 0.61) / altitude.
        let expected = cfg.intrinsics.fx() * 0.455f64.hypot(0.61) / 10.0;
        assert!((radius(10.0) - expected).abs() < 0.05, "{} vs {expected}", radius(10.0));
        assert!((radius(10.0) / radius(30.0) - 3.0).abs() < 0.01);
    }

    #[test]
    fn csv_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        emit_csv(&[], &empty).unwrap();
        assert_eq!(fs::read_to_string(&empty).unwrap(), RECORDS_HEADER.join(",") + "\n");

        let grid = generate_grid(&ScenarioConfig::default(), &NoiseModel::default()).unwrap();
        let report = run_geolocation_accuracy(&grid, &AccuracyOptions::default());
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        emit_summary(report.summaries(), &a).unwrap();
        let again = run_geolocation_accuracy(&grid, &AccuracyOptions::default());
        emit_summary(again.summaries(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        let text = fs::read_to_string(&a).unwrap();
        let rows: Vec<_> = text.lines().skip(1).collect();
        assert_eq!(rows.iter().filter(|l| l.contains(",altitude,")).count(), 3);
        assert_eq!(rows.iter().filter(|l| l.contains(",pitch,")).count(), 4);
        assert!(rows[0].ends_with(",1.3"), "{}", rows[0]);
    }

    #[test]
    fn missing_grid_maps_to_missing_truth() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_accuracy_from_dir(dir.path(), &AccuracyOptions::default()).unwrap_err();
        assert!(matches!(err, AnalysisError::MissingTruth(_)), "{err}");
    }
}
