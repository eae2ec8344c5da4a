//! Request and response bodies plus the endpoint handlers.
//!
//! Bodies are parsed by hand from raw bytes so that any malformed input maps
//! to `bad_request` rather than a framework rejection.

use std::sync::atomic::Ordering;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use poiloc_core::geodesy::GeodeticCoord;
use poiloc_core::poi_store::{ChangeCursor, OperatorState, Poi, PoiKind, Role};
use poiloc_core::projection::{self, CameraPose, GroundModel, PixelCoord, Projection};
use poiloc_core::telemetry::{FrameMeta, TelemetryRecord};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::metrics::{process_usage, ProcessUsage};
use crate::AppState;

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    Ok(serde_json::from_slice(body)?)
}

fn json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    let body = serde_json::to_vec(value).expect("response serializes");
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

/// Camera pose and intrinsics in telemetry field names. `uav_id`, `seq` and
/// `t_ms` are accepted but optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFields {
    #[serde(default)]
    pub uav_id: Option<String>,
    #[serde(default)]
    pub seq: u64,
    #[serde(default)]
    pub t_ms: u64,
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub hfov_deg: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl PoseFields {
    /// Validated frame metadata, with the same quaternion policy as the
    /// telemetry decoder.
    pub fn frame_meta(&self) -> Result<FrameMeta, ApiError> {
        let record = TelemetryRecord {
            uav_id: self.uav_id.clone().filter(|s| !s.is_empty()).unwrap_or_else(|| "request".into()),
            seq: self.seq,
            t_ms: self.t_ms,
            lat_deg: self.lat_deg,
            lon_deg: self.lon_deg,
            alt_m: self.alt_m,
            qw: self.qw,
            qx: self.qx,
            qy: self.qy,
            qz: self.qz,
            hfov_deg: self.hfov_deg,
            width_px: self.width_px,
            height_px: self.height_px,
        };
        Ok(FrameMeta::try_from(record)?)
    }
}

impl From<&FrameMeta> for PoseFields {
    fn from(m: &FrameMeta) -> Self {
        let r = TelemetryRecord::from(m);
        Self {
            uav_id: Some(r.uav_id),
            seq: r.seq,
            t_ms: r.t_ms,
            lat_deg: r.lat_deg,
            lon_deg: r.lon_deg,
            alt_m: r.alt_m,
            qw: r.qw,
            qx: r.qx,
            qy: r.qy,
            qz: r.qz,
            hfov_deg: r.hfov_deg,
            width_px: r.width_px,
            height_px: r.height_px,
        }
    }
}

/// Optional mission frame origin. When absent the endpoints use the camera's
/// latitude and longitude at the reference altitude of the request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OriginFields {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_lat_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_lon_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_alt_m: Option<f64>,
}

impl OriginFields {
    pub fn from_coord(c: &GeodeticCoord) -> Self {
        Self {
            origin_lat_deg: Some(c.lat_deg()),
            origin_lon_deg: Some(c.lon_deg()),
            origin_alt_m: Some(c.alt_m()),
        }
    }

    pub fn resolve(&self, pose: &CameraPose, reference_alt_m: f64) -> Result<GeodeticCoord, ApiError> {
        match (self.origin_lat_deg, self.origin_lon_deg, self.origin_alt_m) {
            (Some(lat), Some(lon), alt) => Ok(GeodeticCoord::new(lat, lon, alt.unwrap_or(reference_alt_m))?),
            (None, None, None) => Ok(pose.position.with_alt(reference_alt_m)?),
            _ => Err(ApiError::bad_request("origin_lat_deg and origin_lon_deg must be given together")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeolocateRequest {
    #[serde(flatten)]
    pub pose: PoseFields,
    pub u_px: f64,
    pub v_px: f64,
    pub ground: GroundModel,
    #[serde(flatten)]
    pub origin: OriginFields,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeolocateResponse {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectRequest {
    #[serde(flatten)]
    pub pose: PoseFields,
    pub poi_lat_deg: f64,
    pub poi_lon_deg: f64,
    pub poi_alt_m: f64,
    #[serde(flatten)]
    pub origin: OriginFields,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectResponse {
    pub u_px: f64,
    pub v_px: f64,
    pub in_frame: bool,
}

impl From<Projection> for ProjectResponse {
    fn from(p: Projection) -> Self {
        Self {
            u_px: p.pixel.u,
            v_px: p.pixel.v,
            in_frame: p.in_frame,
        }
    }
}

/// The library call behind `POST /v1/geolocate`.
pub fn geolocate(req: &GeolocateRequest) -> Result<GeolocateResponse, ApiError> {
    let meta = req.pose.frame_meta()?;
    let reference = match req.ground {
        GroundModel::LocalPlane { ground_alt_m } => ground_alt_m,
        GroundModel::Ellipsoid { offset_alt_m } => offset_alt_m,
    };
    let origin = req.origin.resolve(&meta.pose, reference)?;
    let px = PixelCoord::new(req.u_px, req.v_px);
    let hit = projection::geolocate(&meta.pose, &meta.intr, &px, &req.ground, &origin)?;
    Ok(GeolocateResponse {
        lat_deg: hit.lat_deg(),
        lon_deg: hit.lon_deg(),
        alt_m: hit.alt_m(),
    })
}

/// The library call behind `POST /v1/project`.
pub fn project(req: &ProjectRequest) -> Result<ProjectResponse, ApiError> {
    let meta = req.pose.frame_meta()?;
    let poi = GeodeticCoord::new(req.poi_lat_deg, req.poi_lon_deg, req.poi_alt_m)?;
    let origin = req.origin.resolve(&meta.pose, poi.alt_m())?;
    Ok(projection::project(&meta.pose, &meta.intr, &poi, &origin)?.into())
}

pub async fn geolocate_handler(body: Bytes) -> Result<Response, ApiError> {
    let req: GeolocateRequest = parse(&body)?;
    Ok(json(StatusCode::OK, &geolocate(&req)?))
}

pub async fn project_handler(body: Bytes) -> Result<Response, ApiError> {
    let req: ProjectRequest = parse(&body)?;
    Ok(json(StatusCode::OK, &project(&req)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewPoi {
    pub kind: PoiKind,
    pub location: GeodeticCoord,
    pub created_by: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoiUpdate {
    #[serde(default)]
    pub kind: Option<PoiKind>,
    #[serde(default)]
    pub location: Option<GeodeticCoord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiPage {
    pub pois: Vec<Poi>,
    pub cursor: u64,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct CursorQuery {
    #[serde(default)]
    pub cursor: u64,
}

/// Blocking store calls run off the async workers because they fsync.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(crate::error::ErrorCode::StorageFailure, e.to_string()))
}

pub async fn add_poi_handler(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: NewPoi = parse(&body)?;
    let store = state.store.clone();
    let poi = blocking(move || store.add_poi(req.kind, req.location, &req.created_by)).await??;
    Ok(json(StatusCode::CREATED, &poi))
}

pub async fn get_pois_handler(
    State(state): State<AppState>,
    query: Result<Query<CursorQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let (pois, cursor) = state.store.get_pois(ChangeCursor::new(q.cursor));
    Ok(json(
        StatusCode::OK,
        &PoiPage {
            pois,
            cursor: cursor.last_revision,
        },
    ))
}

pub async fn update_poi_handler(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: PoiUpdate = parse(&body)?;
    let store = state.store.clone();
    let poi = blocking(move || store.update_poi(&id, req.kind, req.location)).await??;
    Ok(json(StatusCode::OK, &poi))
}

pub async fn delete_poi_handler(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let store = state.store.clone();
    let poi = blocking(move || store.delete_poi(&id)).await??;
    Ok(json(StatusCode::OK, &poi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorUpdate {
    pub role: Role,
    #[serde(default)]
    pub location: Option<GeodeticCoord>,
    #[serde(default)]
    pub next_target: Option<String>,
    #[serde(default)]
    pub updated_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorList {
    pub operators: Vec<OperatorState>,
}

pub async fn update_operator_handler(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: OperatorUpdate = parse(&body)?;
    let op = OperatorState {
        id,
        role: req.role,
        location: req.location,
        next_target: req.next_target,
        updated_at_ms: req.updated_at_ms,
    };
    let store = state.store.clone();
    let saved = blocking(move || store.update_operator(op)).await??;
    Ok(json(StatusCode::OK, &saved))
}

pub async fn list_operators_handler(State(state): State<AppState>) -> Response {
    json(
        StatusCode::OK,
        &OperatorList {
            operators: state.store.list_operators(),
        },
    )
}

pub async fn publish_handler(
    State(state): State<AppState>,
    Path(uav_id): Path<String>,
    body: Body,
) -> Result<Response, ApiError> {
    if uav_id.is_empty() {
        return Err(ApiError::bad_request("empty uav_id"));
    }
    let report = state
        .hub
        .ingest(&uav_id, body.into_data_stream())
        .await
        .map_err(|e| ApiError::bad_request(format!("body read failed: {e}")))?;
    Ok(json(StatusCode::OK, &report))
}

pub async fn subscribe_handler(State(state): State<AppState>, Path(uav_id): Path<String>) -> Result<Response, ApiError> {
    use futures::StreamExt;
    let stream = state
        .hub
        .subscribe(&uav_id)
        .ok_or_else(|| ApiError::not_found(format!("no stream for uav {uav_id:?}")))?;
    let body = Body::from_stream(stream.map(Ok::<_, std::convert::Infallible>));
    Ok((
        StatusCode::OK,
        [(header::CONTENT_TYPE, "application/x-ndjson"), (header::CACHE_CONTROL, "no-cache")],
        body,
    )
        .into_response())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerStats {
    #[serde(flatten)]
    pub process: ProcessUsage,
    pub uav_streams: usize,
    pub records_accepted: u64,
    pub records_rejected: u64,
    pub subscribers_dropped: u64,
    pub poi_count: usize,
    pub poi_revision: u64,
}

pub async fn stats_handler(State(state): State<AppState>) -> Response {
    let c = &state.hub.counters;
    json(
        StatusCode::OK,
        &ServerStats {
            process: process_usage(),
            uav_streams: state.hub.uav_count(),
            records_accepted: c.accepted.load(Ordering::Relaxed),
            records_rejected: c.rejected.load(Ordering::Relaxed),
            subscribers_dropped: c.dropped_subscribers.load(Ordering::Relaxed),
            poi_count: state.store.poi_count(),
            poi_revision: state.store.revision(),
        },
    )
}

pub async fn health_handler() -> Response {
    json(StatusCode::OK, &serde_json::json!({ "status": "ok" }))
}

pub async fn fallback_handler() -> ApiError {
    ApiError::not_found("no such endpoint")
}
