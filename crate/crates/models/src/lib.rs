//! Model services over HTTP: an axum router exposing any
//! [`ModelService`](kayra_core::protocol::ModelService) and a blocking
//! client implementing the pipeline's stage backends against it.

mod client;
mod server;

pub use client::{HttpBackends, ServiceEndpoints, StageTimeouts};
pub use server::{model_router, spawn_server, BackgroundServer, Endpoint, MAX_BODY_BYTES};
