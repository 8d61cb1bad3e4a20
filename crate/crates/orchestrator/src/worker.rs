use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use kayra_backend::{now_ms, JobResult, Store};
use kayra_core::cascade::CascadeParams;
use kayra_core::pipeline::{run_cascade, JobState, StageBackends};

/// What one claim-run-write cycle did.
#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub job_id: String,
    pub state: JobState,
    /// False when another delivery of the same job had already written its
    /// result, so this run changed nothing.
    pub first_write: bool,
}

/// Pulls jobs from the shared queue and runs the cascade on them.
#[derive(Clone)]
pub struct Worker {
    pub id: String,
    store: Arc<Store>,
    backends: Arc<dyn StageBackends>,
    params: CascadeParams,
    lease_ms: u64,
}

impl Worker {
    pub fn new(
        id: impl Into<String>,
        store: Arc<Store>,
        backends: Arc<dyn StageBackends>,
        params: CascadeParams,
        lease_ms: u64,
    ) -> Self {
        Self {
            id: id.into(),
            store,
            backends,
            params,
            lease_ms,
        }
    }

    /// Claims the oldest queued job, runs it while renewing the lease, and
    /// writes the result. `None` when the queue is empty.
    pub fn step(&self) -> Result<Option<Processed>, kayra_backend::Error> {
        let lease = self.lease_ms as i64;
        let Some(claimed) = self.store.claim_next(&self.id, lease, now_ms())? else {
            return Ok(None);
        };
        let job_id = claimed.job.job_id.clone();
        tracing::info!(worker = %self.id, job = %job_id, attempt = claimed.job.attempts, "claimed");
        let (stop_tx, stop_rx) = mpsc::channel::<()>();
        let run = std::thread::scope(|s| {
            let job_id = &job_id;
            s.spawn(move || {
                let beat = Duration::from_millis((self.lease_ms / 3).max(1));
                while let Err(mpsc::RecvTimeoutError::Timeout) = stop_rx.recv_timeout(beat) {
                    match self.store.renew_lease(job_id, &self.id, lease, now_ms()) {
                        Ok(true) => {}
                        Ok(false) => {
                            tracing::warn!(worker = %self.id, job = %job_id, "lease lost");
                            break;
                        }
                        Err(e) => tracing::warn!(worker = %self.id, job = %job_id, "lease renewal failed: {e}"),
                    }
                }
            });
            let run = run_cascade(&claimed.model_key, &claimed.raster, &self.params, self.backends.as_ref());
            drop(stop_tx);
            run
        });
        let first_write = self.store.complete_job(
            &job_id,
            &JobResult {
                state: run.state,
                annotations: run.annotations,
                chain: run.chain,
                stage_statuses: run.statuses,
            },
        )?;
        tracing::info!(worker = %self.id, job = %job_id, state = run.state.as_str(), first_write, "finished");
        Ok(Some(Processed {
            job_id,
            state: run.state,
            first_write,
        }))
    }

    /// Processes jobs until `stop` is raised, sleeping `poll` whenever the
    /// queue is empty.
    pub fn run_until(&self, stop: &AtomicBool, poll: Duration) {
        while !stop.load(Ordering::Relaxed) {
            match self.step() {
                Ok(Some(_)) => {}
                Ok(None) => std::thread::sleep(poll),
                Err(e) => {
                    tracing::error!(worker = %self.id, "queue error: {e}");
                    std::thread::sleep(poll);
                }
            }
        }
    }
}

/// A set of worker threads; stopped and joined on drop.
pub struct WorkerPool {
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    pub fn spawn(workers: Vec<Worker>, poll: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let threads = workers
            .into_iter()
            .map(|w| {
                let stop = stop.clone();
                std::thread::Builder::new()
                    .name(w.id.clone())
                    .spawn(move || w.run_until(&stop, poll))
                    .expect("spawn worker thread")
            })
            .collect();
        Self { stop, threads }
    }

    pub fn len(&self) -> usize {
        self.threads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.threads.is_empty()
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.shutdown();
    }
}
