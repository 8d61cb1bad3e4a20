//! Pipeline orchestrator: leases jobs from the shared queue, drives the
//! cascade against the model services with per-stage timeouts and retries,
//! and writes results back idempotently.

pub mod config;
pub mod http;
pub mod worker;

use std::sync::Arc;
use std::time::Duration;

pub use config::{layered, ConfigError, PipelineConfig, WorkerConfig};
pub use http::orchestrator_router;
pub use worker::{Processed, Worker, WorkerPool};

use kayra_backend::Store;
use kayra_core::pipeline::{Retrying, StageBackends};
use kayra_models::HttpBackends;

/// HTTP clients for the configured services, with the configured retries.
pub fn remote_backends(cfg: &PipelineConfig) -> Arc<dyn StageBackends> {
    Arc::new(Retrying::new(HttpBackends::new(cfg.endpoints.clone(), cfg.timeouts), cfg.retries))
}

/// Starts `cfg.worker.workers` workers named `{prefix}-{n}` on `store`.
pub fn spawn_pool(cfg: &PipelineConfig, store: Arc<Store>, backends: Arc<dyn StageBackends>, prefix: &str) -> WorkerPool {
    let workers = (0..cfg.worker.workers)
        .map(|n| Worker::new(format!("{prefix}-{n}"), store.clone(), backends.clone(), cfg.cascade.clone(), cfg.worker.lease_ms))
        .collect();
    WorkerPool::spawn(workers, Duration::from_millis(cfg.worker.poll_ms))
}
