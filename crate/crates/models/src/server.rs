use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kayra_core::protocol::{
    ClassifyRequest, ClassifyResponse, DedupRequest, DedupResponse, Health, InstanceRequest,
    InstanceResponse, ModelService, ProtocolError, SemSegRequest, SemSegResponse,
};
use serde::Serialize;

/// Request bodies carry whole base64 rasters; a 4k×4k crop is ~22 MB.
pub const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    SemSeg,
    Instances,
    Dedup,
    Classify,
}

impl Endpoint {
    pub const ALL: [Endpoint; 4] = [Endpoint::SemSeg, Endpoint::Instances, Endpoint::Dedup, Endpoint::Classify];

    pub fn path(self) -> &'static str {
        match self {
            Endpoint::SemSeg => "/v1/semseg",
            Endpoint::Instances => "/v1/instances",
            Endpoint::Dedup => "/v1/dedup",
            Endpoint::Classify => "/v1/classify",
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

struct ApiError(ProtocolError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ProtocolError::UnknownImageId(_) => StatusCode::NOT_FOUND,
            ProtocolError::InvalidResponse(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        (status, Json(ErrorBody { error: self.0.to_string() })).into_response()
    }
}

type Model = Arc<dyn ModelService>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ProtocolError> + Send + 'static,
) -> Result<Json<T>, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ProtocolError::InvalidResponse(format!("handler panicked: {e}"))))?
        .map(Json)
        .map_err(ApiError)
}

macro_rules! handler {
    ($name:ident, $method:ident, $req:ty, $resp:ty) => {
        async fn $name(State(model): State<Model>, Json(req): Json<$req>) -> Result<Json<$resp>, ApiError> {
            blocking(move || model.$method(&req)).await
        }
    };
}

handler!(semseg, semseg, SemSegRequest, SemSegResponse);
handler!(instances, instances, InstanceRequest, InstanceResponse);
handler!(dedup, dedup, DedupRequest, DedupResponse);
handler!(classify, classify, ClassifyRequest, ClassifyResponse);

async fn healthz(State(model): State<Model>) -> Json<Health> {
    Json(Health {
        service: model.service_name().to_string(),
        model_version: model.model_version().to_string(),
    })
}

/// Router serving `endpoints` of `model` plus `GET /healthz`.
pub fn model_router(model: Arc<dyn ModelService>, endpoints: &[Endpoint]) -> Router {
    let mut router = Router::new().route("/healthz", get(healthz));
    for e in endpoints {
        router = match e {
            Endpoint::SemSeg => router.route(e.path(), post(semseg)),
            Endpoint::Instances => router.route(e.path(), post(instances)),
            Endpoint::Dedup => router.route(e.path(), post(dedup)),
            Endpoint::Classify => router.route(e.path(), post(classify)),
        };
    }
    router.layer(DefaultBodyLimit::max(MAX_BODY_BYTES)).with_state(model)
}

/// A router served from its own thread and runtime; shut down on drop.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves `router` until the
/// returned handle is dropped.
pub fn spawn_server(router: Router, addr: SocketAddr) -> std::io::Result<BackgroundServer> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name(format!("http-{addr}"))
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("tokio runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                let shutdown = async {
                    let _ = rx.await;
                };
                if let Err(e) = axum::serve(listener, router).with_graceful_shutdown(shutdown).await {
                    tracing::error!(error = %e, "server stopped");
                }
            });
        })?;
    Ok(BackgroundServer {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
