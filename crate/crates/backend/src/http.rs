use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::auth::Principal;
use crate::edits::Edit;
use crate::service::Backend;
use crate::Error;

/// Upload limit for raw microscope images.
pub const MAX_UPLOAD_BYTES: usize = 256 * 1024 * 1024;

#[derive(Serialize)]
struct ErrorBody {
    kind: &'static str,
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    current_version: Option<u64>,
}

pub struct ApiError(pub Error);

impl ApiError {
    fn kind(&self) -> (StatusCode, &'static str) {
        match &self.0 {
            Error::NotFound => (StatusCode::NOT_FOUND, "NotFound"),
            Error::VersionConflict { .. } => (StatusCode::CONFLICT, "VersionConflict"),
            Error::SignedOffImmutable => (StatusCode::CONFLICT, "SignedOffImmutable"),
            Error::UnknownAnnotation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "UnknownAnnotation"),
            Error::InvalidEdit(_) => (StatusCode::UNPROCESSABLE_ENTITY, "InvalidEdit"),
            Error::UnsupportedFormat => (StatusCode::UNSUPPORTED_MEDIA_TYPE, "UnsupportedFormat"),
            Error::CorruptImage(_) => (StatusCode::UNPROCESSABLE_ENTITY, "CorruptImage"),
            Error::UnknownVersion(_) => (StatusCode::NOT_FOUND, "UnknownVersion"),
            Error::MissingPatientId(_) => (StatusCode::UNPROCESSABLE_ENTITY, "MissingPatientId"),
            Error::NotReady => (StatusCode::CONFLICT, "NotReady"),
            Error::Unauthorized => (StatusCode::UNAUTHORIZED, "Unauthorized"),
            Error::InvalidRequest(_) => (StatusCode::BAD_REQUEST, "InvalidRequest"),
            Error::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "Storage"),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = self.kind();
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!("{}", self.0);
        }
        let current_version = match &self.0 {
            Error::VersionConflict { current, .. } => Some(*current),
            _ => None,
        };
        let mut resp = (
            status,
            Json(ErrorBody {
                kind,
                error: self.0.to_string(),
                current_version,
            }),
        )
            .into_response();
        if status == StatusCode::UNAUTHORIZED {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, header::HeaderValue::from_static("Bearer"));
        }
        resp
    }
}

type Shared = Arc<Backend>;
type ApiResult<T> = Result<T, ApiError>;

fn principal(backend: &Backend, headers: &HeaderMap) -> Result<Principal, Error> {
    let value = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .ok_or(Error::Unauthorized)?;
    let token = value
        .strip_prefix("Bearer ")
        .or_else(|| value.strip_prefix("bearer "))
        .ok_or(Error::Unauthorized)?;
    backend.authenticate(token.trim())
}

/// Authenticates, then runs the store work off the async executor.
async fn scoped<T: Send + 'static>(
    backend: Shared,
    headers: &HeaderMap,
    f: impl FnOnce(&Backend, &Principal) -> Result<T, Error> + Send + 'static,
) -> ApiResult<T> {
    let p = principal(&backend, headers)?;
    tokio::task::spawn_blocking(move || f(&backend, &p))
        .await
        .map_err(|e| Error::Storage(format!("handler panicked: {e}")))?
        .map_err(ApiError)
}

#[derive(Debug, Deserialize)]
struct VersionQuery {
    version: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditRequest {
    pub edit: Edit,
    pub expected_version: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct SignoffRequest {
    #[serde(default)]
    pub expected_version: Option<u64>,
}

async fn upload(State(b): State<Shared>, headers: HeaderMap, mut form: Multipart) -> ApiResult<Response> {
    principal(&b, &headers)?;
    let mut file = None;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| Error::InvalidRequest(format!("multipart: {e}")))?
    {
        if let Some(name) = field.file_name().map(str::to_string) {
            let bytes = field
                .bytes()
                .await
                .map_err(|e| Error::InvalidRequest(format!("multipart: {e}")))?;
            file = Some((name, bytes));
            break;
        }
    }
    let (name, bytes) = file.ok_or_else(|| Error::InvalidRequest("multipart body has no file part".into()))?;
    let rec = scoped(b, &headers, move |b, p| b.ingest(p, &name, &bytes)).await?;
    Ok((StatusCode::CREATED, Json(rec)).into_response())
}

async fn image_meta(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Response> {
    let rec = scoped(b, &headers, move |b, p| b.image(p, &id)).await?;
    Ok(Json(rec).into_response())
}

async fn image_png(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Response> {
    let png = scoped(b, &headers, move |b, p| b.image_png(p, &id)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn submit(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Response> {
    let job = scoped(b, &headers, move |b, p| b.submit_job(p, &id)).await?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn job(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(scoped(b, &headers, move |b, p| b.job(p, &id)).await?).into_response())
}

async fn annotations(
    State(b): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<VersionQuery>,
) -> ApiResult<Response> {
    Ok(Json(scoped(b, &headers, move |b, p| b.annotations(p, &id, q.version)).await?).into_response())
}

async fn edit(
    State(b): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: EditRequest =
        serde_json::from_slice(&body).map_err(|e| Error::InvalidRequest(format!("edit body: {e}")))?;
    let (set, event) = scoped(b, &headers, move |b, p| b.apply_edit(p, &id, &req.edit, req.expected_version)).await?;
    Ok(Json(serde_json::json!({ "set": set, "event": event })).into_response())
}

async fn audit(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(scoped(b, &headers, move |b, p| b.audit(p, &id)).await?).into_response())
}

async fn replay(
    State(b): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<VersionQuery>,
) -> ApiResult<Response> {
    let set = scoped(b, &headers, move |b, p| {
        let v = match q.version {
            Some(v) => v,
            None => b.annotations(p, &id, None)?.version,
        };
        b.replay_audit(p, &id, v)
    })
    .await?;
    Ok(Json(set).into_response())
}

async fn signoff(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: SignoffRequest = if body.iter().all(u8::is_ascii_whitespace) {
        SignoffRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| Error::InvalidRequest(format!("signoff body: {e}")))?
    };
    Ok(Json(scoped(b, &headers, move |b, p| b.sign_off(p, &id, req.expected_version)).await?).into_response())
}

async fn karyogram(
    State(b): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<VersionQuery>,
) -> ApiResult<Response> {
    let png = scoped(b, &headers, move |b, p| b.karyogram_png(p, &id, q.version)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn layout(
    State(b): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<VersionQuery>,
) -> ApiResult<Response> {
    Ok(Json(scoped(b, &headers, move |b, p| b.karyogram_layout(p, &id, q.version)).await?).into_response())
}

async fn iscn(
    State(b): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<VersionQuery>,
) -> ApiResult<Response> {
    Ok(Json(scoped(b, &headers, move |b, p| b.iscn(p, &id, q.version)).await?).into_response())
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "service": "backend", "version": env!("CARGO_PKG_VERSION") }))
}

/// The tenant-scoped REST API.
pub fn backend_router(backend: Arc<Backend>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/images", post(upload))
        .route("/v1/images/{id}", get(image_meta))
        .route("/v1/images/{id}/image", get(image_png))
        .route("/v1/images/{id}/jobs", post(submit))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/images/{id}/annotations", get(annotations))
        .route("/v1/images/{id}/edits", post(edit))
        .route("/v1/images/{id}/audit", get(audit))
        .route("/v1/images/{id}/replay", get(replay))
        .route("/v1/images/{id}/signoff", post(signoff))
        .route("/v1/images/{id}/karyogram", get(karyogram))
        .route("/v1/images/{id}/karyogram/layout", get(layout))
        .route("/v1/images/{id}/iscn", get(iscn))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(backend)
}
