use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use kayra_backend::{Error, Store};
use serde_json::json;

#[derive(Clone)]
struct Ctx {
    store: Arc<Store>,
    workers: usize,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Error> + Send + 'static) -> Result<T, Response> {
    let fail = |status: StatusCode, msg: String| (status, Json(json!({ "error": msg }))).into_response();
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(Error::NotFound)) => Err(fail(StatusCode::NOT_FOUND, "no such job".into())),
        Ok(Err(e)) => Err(fail(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
        Err(e) => Err(fail(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

async fn healthz(State(ctx): State<Ctx>) -> Response {
    let store = ctx.store.clone();
    match blocking(move || store.counts_by_state()).await {
        Ok(counts) => {
            let queue: serde_json::Map<String, serde_json::Value> =
                counts.into_iter().map(|(s, n)| (s.as_str().to_string(), json!(n))).collect();
            Json(json!({ "service": "orchestrator", "workers": ctx.workers, "jobs": queue })).into_response()
        }
        Err(r) => r,
    }
}

async fn status(State(ctx): State<Ctx>, Path(id): Path<String>) -> Response {
    let store = ctx.store.clone();
    match blocking(move || store.job_unscoped(&id)).await {
        Ok(job) => Json(json!({
            "job_id": job.job_id,
            "state": job.state,
            "stage_statuses": job.stage_statuses,
            "attempts": job.attempts,
            "lease_expiry": job.lease_expiry,
            "lease_owner": job.lease_owner,
        }))
        .into_response(),
        Err(r) => r,
    }
}

/// Operator endpoints: `GET /healthz` and `GET /v1/jobs/{id}/status`.
/// Job status is keyed by the unguessable job id and carries no patient
/// data; it is meant for the internal network only.
pub fn orchestrator_router(store: Arc<Store>, workers: usize) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/jobs/{id}/status", get(status))
        .with_state(Ctx { store, workers })
}
