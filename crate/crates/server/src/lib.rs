//! HTTP service over the POI geolocation engine.
//!
//! Endpoints (all JSON unless noted):
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/v1/geolocate` | pixel to ground coordinate |
//! | POST | `/v1/project` | world point to pixel |
//! | POST, GET | `/v1/pois` | add a POI, poll with `?cursor=N` |
//! | POST, DELETE | `/v1/pois/{id}` | update or soft-delete a POI |
//! | POST | `/v1/operators/{id}` | report operator state |
//! | GET | `/v1/operators` | list operators |
//! | POST, GET | `/v1/streams/{uav_id}` | publish or tail telemetry lines |
//! | GET | `/v1/stats` | process and stream counters |

pub mod api;
pub mod client;
pub mod error;
pub mod metrics;
pub mod scaling;
pub mod streams;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::routing::{get, post};
use axum::Router;
use poiloc_core::poi_store::PoiStore;
use tokio::sync::oneshot;

pub use error::{ApiError, ErrorCode};
pub use streams::StreamHub;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_STREAM_BUFFER: usize = 1000;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    /// Journal file for the POI store; `None` keeps POIs in memory only.
    pub store_path: Option<PathBuf>,
    /// Records buffered per subscriber before it is disconnected.
    pub stream_buffer: usize,
    /// Runtime worker threads; `None` uses one per core.
    pub worker_threads: Option<usize>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: DEFAULT_LISTEN.parse().expect("valid default address"),
            store_path: None,
            stream_buffer: DEFAULT_STREAM_BUFFER,
            worker_threads: None,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<PoiStore>,
    pub hub: Arc<StreamHub>,
}

impl AppState {
    pub fn open(config: &ServerConfig) -> anyhow::Result<Self> {
        let store = match &config.store_path {
            Some(p) => PoiStore::open(p)?,
            None => PoiStore::in_memory(),
        };
        Ok(Self {
            store: Arc::new(store),
            hub: Arc::new(StreamHub::new(config.stream_buffer)),
        })
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(api::health_handler))
        .route("/v1/geolocate", post(api::geolocate_handler))
        .route("/v1/project", post(api::project_handler))
        .route("/v1/pois", post(api::add_poi_handler).get(api::get_pois_handler))
        .route(
            "/v1/pois/{id}",
            post(api::update_poi_handler).delete(api::delete_poi_handler),
        )
        .route("/v1/operators", get(api::list_operators_handler))
        .route("/v1/operators/{id}", post(api::update_operator_handler))
        .route(
            "/v1/streams/{uav_id}",
            post(api::publish_handler).get(api::subscribe_handler),
        )
        .route("/v1/stats", get(api::stats_handler))
        .fallback(api::fallback_handler)
        .with_state(state)
}

/// Serves until `shutdown` resolves, then checkpoints the store.
pub async fn serve_until(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let store = state.store.clone();
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    if let Err(e) = tokio::task::spawn_blocking(move || store.checkpoint()).await.expect("checkpoint task") {
        tracing::warn!("checkpoint on shutdown failed: {e}");
    }
    Ok(())
}

/// A server running on its own runtime, for tests and harnesses. Safe to
/// start and stop from inside another runtime.
///
/// [`ServerHandle::kill`] tears the runtime down without any shutdown work,
/// which is how tests simulate a crash.
pub struct ServerHandle {
    addr: SocketAddr,
    runtime: Option<tokio::runtime::Runtime>,
    shutdown: Option<oneshot::Sender<()>>,
    done: std::sync::mpsc::Receiver<std::io::Result<()>>,
    pub state: AppState,
}

impl ServerHandle {
    pub fn start(config: ServerConfig) -> anyhow::Result<Self> {
        let mut builder = tokio::runtime::Builder::new_multi_thread();
        builder.enable_all().thread_name("poiloc-server");
        if let Some(n) = config.worker_threads {
            builder.worker_threads(n.max(1));
        }
        let runtime = builder.build()?;
        let state = AppState::open(&config)?;
        let std_listener = std::net::TcpListener::bind(config.listen)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let listener = {
            let _guard = runtime.enter();
            tokio::net::TcpListener::from_std(std_listener)?
        };
        let (shutdown_tx, shutdown_rx) = oneshot::channel();
        let (done_tx, done_rx) = std::sync::mpsc::channel();
        let task_state = state.clone();
        runtime.spawn(async move {
            let result = serve_until(listener, task_state, async {
                let _ = shutdown_rx.await;
            })
            .await;
            let _ = done_tx.send(result);
        });
        Ok(Self {
            addr,
            runtime: Some(runtime),
            shutdown: Some(shutdown_tx),
            done: done_rx,
            state,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Graceful stop: waits up to `grace` for open connections to finish,
    /// then checkpoints the store.
    pub fn stop(mut self, grace: Duration) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = self.done.recv_timeout(grace);
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }

    /// Abrupt stop with no draining and no checkpoint.
    pub fn kill(mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}
