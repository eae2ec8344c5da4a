//! Multi-UAV load harness.
//!
//! For each fleet size every simulated UAV orbits the POI and publishes
//! telemetry at a fixed rate on its own stream. A subscriber per UAV tails
//! the stream and requests one projection of the POI for every record it
//! receives, as an operator console would. Latency is measured from the
//! moment a record is handed to the publisher connection until its
//! projection response arrives.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use bytes::Bytes;
use futures::StreamExt;
use poiloc_core::geodesy::{EnuFrame, GeodeticCoord};
use poiloc_core::projection::{pose_from_gimbal, CameraIntrinsics, CameraPose};
use poiloc_core::telemetry::{self, FrameMeta};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;

use crate::api::{OriginFields, PoseFields, ProjectRequest, ServerStats};

pub const DEFAULT_FLEET_SIZES: [usize; 5] = [1, 2, 4, 8, 12];
/// Fraction of the offered rate that must be sustained.
pub const THROUGHPUT_FLOOR: f64 = 0.95;

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("server unavailable: {0}")]
    ServerUnavailable(String),
    #[error("invalid scaling config: {0}")]
    InvalidConfig(String),
    #[error("http error: {0}")]
    Http(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub n_uavs: Vec<usize>,
    pub fps: f64,
    pub duration_s: f64,
    /// Time allowed after the last publish for in-flight records to finish.
    pub drain_s: f64,
    pub poi: GeodeticCoord,
    pub orbit_radius_m: f64,
    pub orbit_height_m: f64,
    pub intrinsics: CameraIntrinsics,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        let scenario = poiloc_core::simkit::ScenarioConfig::default();
        Self {
            n_uavs: DEFAULT_FLEET_SIZES.to_vec(),
            fps: 10.0,
            duration_s: 60.0,
            drain_s: 5.0,
            poi: scenario.ground_truth_poi().expect("default POI is valid"),
            orbit_radius_m: 25.0,
            orbit_height_m: 20.0,
            intrinsics: scenario.intrinsics,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<(), ScalingError> {
        let bad = |m: &str| Err(ScalingError::InvalidConfig(m.into()));
        if self.n_uavs.is_empty() || self.n_uavs.contains(&0) {
            return bad("n_uavs must be non-empty and every entry at least 1");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps must be positive");
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) || !(self.drain_s >= 0.0) {
            return bad("duration_s must be positive and drain_s non-negative");
        }
        if !(self.orbit_radius_m > 0.0 && self.orbit_height_m > 0.0) {
            return bad("orbit radius and height must be positive");
        }
        Ok(())
    }

    pub fn frames_per_uav(&self) -> usize {
        (self.fps * self.duration_s).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfRecord {
    pub n_uavs: usize,
    pub records_sent: u64,
    pub records_processed: u64,
    /// Processed records over the time from first publish to last projection.
    pub records_per_s: f64,
    pub offered_per_s: f64,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    /// Server peak resident memory, when the platform reports it.
    pub peak_mb: Option<f64>,
    /// Server CPU time spent during this run.
    pub cpu_time_s: Option<f64>,
    pub subscribers_dropped: u64,
    /// Throughput fell below the floor fraction of the offered rate.
    pub overload: bool,
}

/// Orbit telemetry for UAV `index` of `n`, looking at the POI.
pub fn orbit_frames(cfg: &ScalingConfig, uav_id: &str, index: usize, n: usize) -> Vec<FrameMeta> {
    let frame = EnuFrame::new(cfg.poi);
    let pitch = cfg.orbit_height_m.atan2(cfg.orbit_radius_m).to_degrees();
    let frames = cfg.frames_per_uav();
    // One orbit per run, fleet spread evenly around it.
    let phase0 = std::f64::consts::TAU * index as f64 / n as f64;
    let omega = std::f64::consts::TAU / frames as f64;
    (0..frames)
        .map(|k| {
            let phi = phase0 + omega * k as f64;
            let enu = nalgebra::Vector3::new(
                cfg.orbit_radius_m * phi.sin(),
                cfg.orbit_radius_m * phi.cos(),
                cfg.orbit_height_m,
            );
            FrameMeta {
                uav_id: uav_id.to_string(),
                seq: k as u64,
                t_ms: poiloc_core::simkit::EPOCH_MS + (k as f64 * 1000.0 / cfg.fps).round() as u64,
                pose: CameraPose {
                    position: frame.from_enu(&enu).expect("orbit stays near the POI"),
                    orientation: pose_from_gimbal(phi.to_degrees() + 180.0, pitch),
                },
                intr: cfg.intrinsics,
            }
        })
        .collect()
}

fn http(e: impl std::fmt::Display) -> ScalingError {
    ScalingError::Http(e.to_string())
}

pub async fn fetch_stats(client: &reqwest::Client, base: &str) -> Result<ServerStats, ScalingError> {
    let resp = client
        .get(format!("{base}/v1/stats"))
        .send()
        .await
        .map_err(|e| ScalingError::ServerUnavailable(e.to_string()))?;
    let body = resp.bytes().await.map_err(http)?;
    serde_json::from_slice(&body).map_err(http)
}

/// Runs every fleet size in turn against the server at `base_url`.
pub async fn run_scaling(base_url: &str, cfg: &ScalingConfig) -> Result<Vec<PerfRecord>, ScalingError> {
    cfg.validate()?;
    let base = base_url.trim_end_matches('/');
    let client = reqwest::Client::builder()
        .pool_max_idle_per_host(64)
        .build()
        .map_err(http)?;
    client
        .get(format!("{base}/v1/health"))
        .send()
        .await
        .and_then(|r| r.error_for_status())
        .map_err(|e| ScalingError::ServerUnavailable(e.to_string()))?;

    let mut out = Vec::with_capacity(cfg.n_uavs.len());
    for (run, &n) in cfg.n_uavs.iter().enumerate() {
        out.push(run_fleet(&client, base, cfg, n, run).await?);
    }
    Ok(out)
}

struct UavOutcome {
    sent: u64,
    latencies_ms: Vec<f64>,
    last_done: Option<Instant>,
}

async fn run_fleet(
    client: &reqwest::Client,
    base: &str,
    cfg: &ScalingConfig,
    n: usize,
    run: usize,
) -> Result<PerfRecord, ScalingError> {
    let before = fetch_stats(client, base).await?;
    let start = Instant::now();
    let tasks: Vec<_> = (0..n)
        .map(|i| {
            let client = client.clone();
            let base = base.to_string();
            let cfg = cfg.clone();
            let uav_id = format!("scale-r{run}-u{i}");
            tokio::spawn(async move { run_uav(&client, &base, &cfg, &uav_id, i, n, start).await })
        })
        .collect();
    let mut outcomes = Vec::with_capacity(n);
    for t in tasks {
        outcomes.push(t.await.map_err(http)??);
    }
    let after = fetch_stats(client, base).await?;

    let sent: u64 = outcomes.iter().map(|o| o.sent).sum();
    let mut latencies: Vec<f64> = outcomes.iter().flat_map(|o| o.latencies_ms.iter().copied()).collect();
    latencies.sort_by(f64::total_cmp);
    let processed = latencies.len() as u64;
    let end = outcomes.iter().filter_map(|o| o.last_done).max();
    let elapsed = end.map_or(0.0, |e| (e - start).as_secs_f64()).max(cfg.duration_s * 0.5);
    let records_per_s = processed as f64 / elapsed;
    let offered = n as f64 * cfg.fps;
    let cpu = match (before.process.cpu_time_s, after.process.cpu_time_s) {
        (Some(b), Some(a)) => Some(a - b),
        _ => None,
    };
    Ok(PerfRecord {
        n_uavs: n,
        records_sent: sent,
        records_processed: processed,
        records_per_s,
        offered_per_s: offered,
        latency_p50_ms: percentile(&latencies, 0.50),
        latency_p99_ms: percentile(&latencies, 0.99),
        peak_mb: after.process.peak_rss_mb,
        cpu_time_s: cpu,
        subscribers_dropped: after.subscribers_dropped - before.subscribers_dropped,
        overload: records_per_s < THROUGHPUT_FLOOR * offered,
    })
}

/// Nearest-rank percentile of sorted values; NaN when empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

async fn run_uav(
    client: &reqwest::Client,
    base: &str,
    cfg: &ScalingConfig,
    uav_id: &str,
    index: usize,
    n: usize,
    start: Instant,
) -> Result<UavOutcome, ScalingError> {
    let frames = orbit_frames(cfg, uav_id, index, n);
    let total = frames.len();
    let stream_url = format!("{base}/v1/streams/{uav_id}");

    // An empty publish registers the stream so the subscriber can attach first.
    client
        .post(&stream_url)
        .body(Vec::new())
        .send()
        .await
        .and_then(|r| r.error_for_status())
        .map_err(http)?;
    let sub = client
        .get(&stream_url)
        .send()
        .await
        .and_then(|r| r.error_for_status())
        .map_err(http)?;

    let sent_at: Arc<Vec<OnceLock<Instant>>> = Arc::new((0..total).map(|_| OnceLock::new()).collect());
    let sent = Arc::new(AtomicU64::new(0));
    let deadline = start + Duration::from_secs_f64(cfg.duration_s + cfg.drain_s);

    let (tx, rx) = mpsc::channel::<Result<Bytes, std::io::Error>>(256);
    let publish = {
        let client = client.clone();
        let url = stream_url.clone();
        tokio::spawn(async move {
            let body = reqwest::Body::wrap_stream(tokio_stream_from(rx));
            client.post(url).body(body).send().await.and_then(|r| r.error_for_status())
        })
    };
    let pacer = {
        let sent_at = sent_at.clone();
        let sent = sent.clone();
        let period = Duration::from_secs_f64(1.0 / cfg.fps);
        tokio::spawn(async move {
            let mut ticker = tokio::time::interval(period);
            ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Burst);
            for (k, f) in frames.iter().enumerate() {
                ticker.tick().await;
                let mut line = telemetry::encode(f).into_bytes();
                line.push(b'\n');
                let _ = sent_at[k].set(Instant::now());
                if tx.send(Ok(Bytes::from(line))).await.is_err() {
                    break;
                }
                sent.fetch_add(1, Ordering::Relaxed);
            }
        })
    };

    let mut latencies = Vec::with_capacity(total);
    let mut last_done = None;
    let mut body = sub.bytes_stream();
    let mut buf: Vec<u8> = Vec::new();
    let project_url = format!("{base}/v1/project");
    'outer: while latencies.len() < total {
        let chunk = match tokio::time::timeout_at(deadline.into(), body.next()).await {
            Ok(Some(Ok(c))) => c,
            _ => break,
        };
        buf.extend_from_slice(&chunk);
        while let Some(pos) = buf.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = buf.drain(..=pos).collect();
            let Ok(text) = std::str::from_utf8(&line) else { continue };
            let Ok(meta) = telemetry::decode(text.trim()) else {
                // Disconnect notice or foreign line: the stream is over for us.
                break 'outer;
            };
            let req = ProjectRequest {
                pose: PoseFields::from(&meta),
                poi_lat_deg: cfg.poi.lat_deg(),
                poi_lon_deg: cfg.poi.lon_deg(),
                poi_alt_m: cfg.poi.alt_m(),
                origin: OriginFields::default(),
            };
            let body = serde_json::to_vec(&req).expect("request serializes");
            let ok = client
                .post(&project_url)
                .header("content-type", "application/json")
                .body(body)
                .send()
                .await
                .map(|r| r.status().is_success())
                .unwrap_or(false);
            if ok {
                let done = Instant::now();
                if let Some(t0) = sent_at.get(meta.seq as usize).and_then(|c| c.get()) {
                    latencies.push((done - *t0).as_secs_f64() * 1000.0);
                    last_done = Some(done);
                }
            }
        }
    }
    drop(body);
    pacer.await.map_err(http)?;
    publish.await.map_err(http)?.map_err(http)?;
    Ok(UavOutcome {
        sent: sent.load(Ordering::Relaxed),
        latencies_ms: latencies,
        last_done,
    })
}

fn tokio_stream_from<T: Send + 'static>(rx: mpsc::Receiver<T>) -> impl futures::Stream<Item = T> + Send + 'static {
    futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|v| (v, rx)) })
}
