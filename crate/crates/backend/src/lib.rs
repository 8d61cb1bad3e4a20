//! Multi-tenant karyotyping backend: image ingest, the job queue, versioned
//! annotation sets edited through an append-only audit log, karyogram
//! rendering and ISCN suggestions, behind a bearer-token REST API.

pub mod auth;
pub mod edits;
pub mod filename;
pub mod http;
pub mod ingest;
pub mod iscn;
pub mod karyogram;
pub mod service;
pub mod split;
pub mod store;

pub use auth::{Principal, TokenFile};
pub use edits::{apply, Edit};
pub use filename::{parse_filename, ClinicalFields};
pub use http::backend_router;
pub use iscn::{iscn_from_labels, iscn_suggest, IscnSuggestion};
pub use karyogram::{compose_karyogram, render_karyogram, KaryogramLayout, GROUP_NAMES};
pub use service::{now_ms, Backend};
pub use split::{split_dataset_by_patient, DatasetSplit};
pub use store::{AnnotationSet, AuditEvent, ClaimedJob, ImageRecord, Job, JobResult, Store};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not found")]
    NotFound,
    #[error("version conflict: expected {expected}, current {current}")]
    VersionConflict { expected: u64, current: u64 },
    #[error("annotation set is signed off")]
    SignedOffImmutable,
    #[error("unknown annotation {0}")]
    UnknownAnnotation(u32),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("unsupported image format")]
    UnsupportedFormat,
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("unknown version {0}")]
    UnknownVersion(u64),
    #[error("record {0} has no patient id")]
    MissingPatientId(String),
    #[error("no annotations yet")]
    NotReady,
    #[error("unauthorized")]
    Unauthorized,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("storage: {0}")]
    Storage(String),
}

impl From<rusqlite::Error> for Error {
    fn from(e: rusqlite::Error) -> Self {
        Error::Storage(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Storage(format!("stored JSON: {e}"))
    }
}
