//! Typed async client for the HTTP API.

use poiloc_core::geodesy::GeodeticCoord;
use poiloc_core::poi_store::{OperatorState, Poi, PoiKind};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::{
    GeolocateRequest, GeolocateResponse, NewPoi, OperatorList, OperatorUpdate, PoiPage, ProjectRequest,
    ProjectResponse, ServerStats,
};
use crate::error::ApiError;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("{0}")]
    Api(ApiError),
    #[error("unexpected response ({status}): {body}")]
    Unexpected { status: u16, body: String },
}

impl ClientError {
    pub fn api(&self) -> Option<&ApiError> {
        match self {
            ClientError::Api(e) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: &str) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn send<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder) -> Result<T, ClientError> {
        let resp = req.send().await.map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.bytes().await.map_err(|e| ClientError::Transport(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_slice(&body).map_err(|_| ClientError::Unexpected {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&body).into_owned(),
            });
        }
        match serde_json::from_slice::<ApiError>(&body) {
            Ok(e) => Err(ClientError::Api(e)),
            Err(_) => Err(ClientError::Unexpected {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&body).into_owned(),
            }),
        }
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let bytes = serde_json::to_vec(body).expect("request serializes");
        self.send(
            self.http
                .post(format!("{}{path}", self.base))
                .header("content-type", "application/json")
                .body(bytes),
        )
        .await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.send(self.http.get(format!("{}{path}", self.base))).await
    }

    pub async fn geolocate(&self, req: &GeolocateRequest) -> Result<GeolocateResponse, ClientError> {
        self.post("/v1/geolocate", req).await
    }

    pub async fn project(&self, req: &ProjectRequest) -> Result<ProjectResponse, ClientError> {
        self.post("/v1/project", req).await
    }

    pub async fn add_poi(&self, kind: PoiKind, location: GeodeticCoord, created_by: &str) -> Result<Poi, ClientError> {
        let body = NewPoi {
            kind,
            location,
            created_by: created_by.to_string(),
        };
        self.post("/v1/pois", &body).await
    }

    pub async fn get_pois(&self, cursor: u64) -> Result<PoiPage, ClientError> {
        self.get(&format!("/v1/pois?cursor={cursor}")).await
    }

    pub async fn update_operator(&self, id: &str, update: &OperatorUpdate) -> Result<OperatorState, ClientError> {
        self.post(&format!("/v1/operators/{id}"), update).await
    }

    pub async fn list_operators(&self) -> Result<Vec<OperatorState>, ClientError> {
        Ok(self.get::<OperatorList>("/v1/operators").await?.operators)
    }

    pub async fn stats(&self) -> Result<ServerStats, ClientError> {
        self.get("/v1/stats").await
    }

    /// Raw request builder for endpoints without a typed wrapper.
    pub fn http(&self) -> &reqwest::Client {
        &self.http
    }
}
