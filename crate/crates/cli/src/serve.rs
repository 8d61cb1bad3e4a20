//! Long-running service roles: the backend API, the orchestrator workers,
//! each model service on its own, or the oracle serving all of them.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use axum::Router;
use kayra_backend::{backend_router, Backend, Store, TokenFile};
use kayra_core::protocol::{OracleModels, StubModels};
use kayra_models::{model_router, spawn_server, Endpoint};
use kayra_orchestrator::{orchestrator_router, remote_backends, spawn_pool, WorkerPool};

use crate::config::CliConfig;
use crate::run::{oracle_noise, registry_from};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Role {
    /// Tenant-scoped image, job, annotation and audit API.
    Backend,
    /// Queue workers plus the internal job-status API.
    Orchestrator,
    Semseg,
    Instances,
    Dedup,
    Classify,
    /// Ground-truth oracle answering all four model endpoints.
    Oracle,
}

fn stub_service(cfg: &CliConfig, endpoint: Endpoint) -> Router {
    model_router(Arc::new(StubModels::new(cfg.cascade.clone())), &[endpoint])
}

/// Starts `role` on `listen` and serves until interrupted. The first line
/// written to stdout is `listening on <url>`.
pub fn serve(role: Role, listen: SocketAddr, cfg: &CliConfig) -> anyhow::Result<()> {
    let mut pool: Option<WorkerPool> = None;
    let router = match role {
        Role::Backend => {
            let store = Arc::new(Store::open(&cfg.database).with_context(|| format!("opening {}", cfg.database))?);
            let tokens = TokenFile::load(&cfg.serve.tokens).with_context(|| format!("loading {}", cfg.serve.tokens))?;
            backend_router(Arc::new(Backend::new(store, tokens)?))
        }
        Role::Orchestrator => {
            let pipeline = cfg.pipeline();
            let store = Arc::new(Store::open(&cfg.database).with_context(|| format!("opening {}", cfg.database))?);
            let workers = spawn_pool(&pipeline, store.clone(), remote_backends(&pipeline), "worker");
            let n = workers.len();
            pool = Some(workers);
            orchestrator_router(store, n)
        }
        Role::Semseg => stub_service(cfg, Endpoint::SemSeg),
        Role::Instances => stub_service(cfg, Endpoint::Instances),
        Role::Dedup => stub_service(cfg, Endpoint::Dedup),
        Role::Classify => stub_service(cfg, Endpoint::Classify),
        Role::Oracle => {
            let dir = if cfg.oracle.ground_truth.is_empty() { "." } else { cfg.oracle.ground_truth.as_str() };
            let registry = registry_from(&BTreeSet::from([PathBuf::from(dir)]))?;
            tracing::info!(spreads = registry.len(), "oracle ground truth loaded");
            model_router(Arc::new(OracleModels::new(registry, oracle_noise(cfg))), &Endpoint::ALL)
        }
    };
    let server = spawn_server(router, listen).with_context(|| format!("binding {listen}"))?;
    println!("listening on {}", server.url());
    std::io::stdout().flush()?;
    tracing::info!(?role, addr = %server.addr, "serving");

    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()?
        .block_on(tokio::signal::ctrl_c())?;
    tracing::info!("shutting down");
    server.stop();
    if let Some(p) = pool {
        p.stop();
    }
    Ok(())
}
