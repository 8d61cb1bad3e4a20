//! SQLite persistence. Every annotation version is stored as a snapshot next
//! to the audit event that produced it, so the two can be cross-checked.

use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use kayra_core::cascade::{Annotation, RoiChain};
use kayra_core::imaging::Raster;
use kayra_core::pipeline::{JobState, StageStatus};
use rusqlite::{params, Connection, OptionalExtension, TransactionBehavior};
use serde::{Deserialize, Serialize};

use crate::edits::Edit;
use crate::filename::ClinicalFields;
use crate::Error;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS tenants (
    tenant_id TEXT PRIMARY KEY,
    name TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS images (
    image_id TEXT PRIMARY KEY,
    tenant_id TEXT NOT NULL,
    filename TEXT NOT NULL,
    model_key TEXT NOT NULL,
    width INTEGER NOT NULL,
    height INTEGER NOT NULL,
    pixels BLOB NOT NULL,
    clinical TEXT,
    ingested_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS jobs (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    job_id TEXT NOT NULL UNIQUE,
    tenant_id TEXT NOT NULL,
    image_id TEXT NOT NULL,
    state TEXT NOT NULL,
    created_at INTEGER NOT NULL,
    lease_owner TEXT,
    lease_expiry INTEGER,
    attempts INTEGER NOT NULL DEFAULT 0,
    statuses TEXT NOT NULL DEFAULT '[]'
);
CREATE INDEX IF NOT EXISTS jobs_queue ON jobs (state, created_at, seq);
CREATE TABLE IF NOT EXISTS job_results (
    job_id TEXT PRIMARY KEY,
    state TEXT NOT NULL,
    annotations TEXT NOT NULL,
    chain TEXT,
    statuses TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS annotation_versions (
    image_id TEXT NOT NULL,
    version INTEGER NOT NULL,
    annotations TEXT NOT NULL,
    PRIMARY KEY (image_id, version)
);
CREATE TABLE IF NOT EXISTS audit_events (
    event_id INTEGER PRIMARY KEY AUTOINCREMENT,
    image_id TEXT NOT NULL,
    tenant_id TEXT NOT NULL,
    actor TEXT NOT NULL,
    ts INTEGER NOT NULL,
    edit TEXT NOT NULL,
    resulting_version INTEGER NOT NULL,
    UNIQUE (image_id, resulting_version)
);
CREATE TABLE IF NOT EXISTS signoffs (
    image_id TEXT PRIMARY KEY,
    tenant_id TEXT NOT NULL,
    user TEXT NOT NULL,
    version INTEGER NOT NULL,
    ts INTEGER NOT NULL
);
";

fn timestamp(ms: i64) -> DateTime<Utc> {
    DateTime::from_timestamp_millis(ms).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub tenant_id: String,
    pub filename: String,
    /// Identifier sent to the model services: the filename stem.
    pub model_key: String,
    pub width: usize,
    pub height: usize,
    pub clinical: Option<ClinicalFields>,
    pub ingested_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub tenant_id: String,
    pub image_id: String,
    pub state: JobState,
    pub created_at: DateTime<Utc>,
    pub stage_statuses: Vec<StageStatus>,
    pub lease_expiry: Option<DateTime<Utc>>,
    pub lease_owner: Option<String>,
    pub attempts: u32,
}

/// A job leased to a worker together with what it needs to run.
#[derive(Debug, Clone)]
pub struct ClaimedJob {
    pub job: Job,
    pub model_key: String,
    pub raster: Raster,
}

/// Outcome of one pipeline run as written back by a worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub state: JobState,
    pub annotations: Vec<Annotation>,
    pub chain: Option<RoiChain>,
    pub stage_statuses: Vec<StageStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub image_id: String,
    pub version: u64,
    pub annotations: Vec<Annotation>,
    pub signed_off: bool,
    pub signoff_user: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub event_id: u64,
    pub image_id: String,
    pub tenant_id: String,
    pub actor: String,
    pub timestamp: DateTime<Utc>,
    pub edit: Edit,
    pub resulting_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signoff {
    pub user: String,
    pub version: u64,
    pub timestamp: DateTime<Utc>,
}

pub struct Store {
    conn: Mutex<Connection>,
}

const JOB_COLUMNS: &str = "job_id, tenant_id, image_id, state, created_at, statuses, lease_expiry, lease_owner, attempts";

fn job_from_row(row: &rusqlite::Row<'_>) -> rusqlite::Result<(Job, String)> {
    let state: String = row.get(3)?;
    let statuses: String = row.get(5)?;
    let job = Job {
        job_id: row.get(0)?,
        tenant_id: row.get(1)?,
        image_id: row.get(2)?,
        state: state.parse().unwrap_or(JobState::Failed),
        created_at: timestamp(row.get(4)?),
        stage_statuses: Vec::new(),
        lease_expiry: row.get::<_, Option<i64>>(6)?.map(timestamp),
        lease_owner: row.get(7)?,
        attempts: row.get(8)?,
    };
    Ok((job, statuses))
}

fn finish_job(raw: (Job, String)) -> Result<Job, Error> {
    let (mut job, statuses) = raw;
    job.stage_statuses = serde_json::from_str(&statuses)?;
    Ok(job)
}

impl Store {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, Error> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> Result<Self, Error> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self, Error> {
        conn.busy_timeout(Duration::from_secs(10))?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn: Mutex::new(conn) })
    }

    fn conn(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn upsert_tenant(&self, tenant_id: &str, name: &str) -> Result<(), Error> {
        self.conn().execute(
            "INSERT INTO tenants (tenant_id, name) VALUES (?1, ?2)
             ON CONFLICT (tenant_id) DO UPDATE SET name = excluded.name",
            params![tenant_id, name],
        )?;
        Ok(())
    }

    pub fn insert_image(&self, rec: &ImageRecord, raster: &Raster) -> Result<(), Error> {
        let clinical = rec.clinical.as_ref().map(serde_json::to_string).transpose()?;
        self.conn().execute(
            "INSERT INTO images (image_id, tenant_id, filename, model_key, width, height, pixels, clinical, ingested_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
            params![
                rec.image_id,
                rec.tenant_id,
                rec.filename,
                rec.model_key,
                rec.width as i64,
                rec.height as i64,
                raster.pixels(),
                clinical,
                rec.ingested_at.timestamp_millis(),
            ],
        )?;
        Ok(())
    }

    /// Image metadata, visible only to its own tenant.
    pub fn image(&self, tenant_id: &str, image_id: &str) -> Result<ImageRecord, Error> {
        let row = self
            .conn()
            .query_row(
                "SELECT image_id, tenant_id, filename, model_key, width, height, clinical, ingested_at
                 FROM images WHERE image_id = ?1 AND tenant_id = ?2",
                params![image_id, tenant_id],
                |r| {
                    Ok((
                        ImageRecord {
                            image_id: r.get(0)?,
                            tenant_id: r.get(1)?,
                            filename: r.get(2)?,
                            model_key: r.get(3)?,
                            width: r.get::<_, i64>(4)? as usize,
                            height: r.get::<_, i64>(5)? as usize,
                            clinical: None,
                            ingested_at: timestamp(r.get(7)?),
                        },
                        r.get::<_, Option<String>>(6)?,
                    ))
                },
            )
            .optional()?
            .ok_or(Error::NotFound)?;
        let (mut rec, clinical) = row;
        rec.clinical = clinical.map(|c| serde_json::from_str(&c)).transpose()?;
        Ok(rec)
    }

    fn raster_unscoped(conn: &Connection, image_id: &str) -> Result<Raster, Error> {
        let (w, h, px): (i64, i64, Vec<u8>) = conn
            .query_row(
                "SELECT width, height, pixels FROM images WHERE image_id = ?1",
                params![image_id],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
            )
            .optional()?
            .ok_or(Error::NotFound)?;
        Raster::new(w as usize, h as usize, px).map_err(|e| Error::Storage(e.to_string()))
    }

    pub fn image_raster(&self, tenant_id: &str, image_id: &str) -> Result<Raster, Error> {
        self.image(tenant_id, image_id)?;
        Self::raster_unscoped(&self.conn(), image_id)
    }

    pub fn create_job(&self, job_id: &str, tenant_id: &str, image_id: &str, now_ms: i64) -> Result<Job, Error> {
        self.image(tenant_id, image_id)?;
        self.conn().execute(
            "INSERT INTO jobs (job_id, tenant_id, image_id, state, created_at) VALUES (?1, ?2, ?3, 'Queued', ?4)",
            params![job_id, tenant_id, image_id, now_ms],
        )?;
        self.job_unscoped(job_id)
    }

    pub fn job(&self, tenant_id: &str, job_id: &str) -> Result<Job, Error> {
        let job = self.job_unscoped(job_id)?;
        if job.tenant_id != tenant_id {
            return Err(Error::NotFound);
        }
        Ok(job)
    }

    /// Job lookup without tenant scoping, for the orchestrator's status
    /// endpoint.
    pub fn job_unscoped(&self, job_id: &str) -> Result<Job, Error> {
        let raw = self
            .conn()
            .query_row(&format!("SELECT {JOB_COLUMNS} FROM jobs WHERE job_id = ?1"), params![job_id], job_from_row)
            .optional()?
            .ok_or(Error::NotFound)?;
        finish_job(raw)
    }

    pub fn jobs_for_image(&self, tenant_id: &str, image_id: &str) -> Result<Vec<Job>, Error> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "SELECT {JOB_COLUMNS} FROM jobs WHERE tenant_id = ?1 AND image_id = ?2 ORDER BY created_at, seq"
        ))?;
        let raws = stmt
            .query_map(params![tenant_id, image_id], job_from_row)?
            .collect::<Result<Vec<_>, _>>()?;
        raws.into_iter().map(finish_job).collect()
    }

    /// Returns Running jobs whose lease has lapsed to the queue.
    pub fn requeue_expired(&self, now_ms: i64) -> Result<usize, Error> {
        Ok(self.conn().execute(
            "UPDATE jobs SET state = 'Queued', lease_owner = NULL, lease_expiry = NULL
             WHERE state = 'Running' AND lease_expiry IS NOT NULL AND lease_expiry <= ?1",
            params![now_ms],
        )?)
    }

    /// Leases the oldest queued job to `worker`, after first requeueing
    /// expired leases.
    pub fn claim_next(&self, worker: &str, lease_ms: i64, now_ms: i64) -> Result<Option<ClaimedJob>, Error> {
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        tx.execute(
            "UPDATE jobs SET state = 'Queued', lease_owner = NULL, lease_expiry = NULL
             WHERE state = 'Running' AND lease_expiry IS NOT NULL AND lease_expiry <= ?1",
            params![now_ms],
        )?;
        let next: Option<String> = tx
            .query_row(
                "SELECT job_id FROM jobs WHERE state = 'Queued' ORDER BY created_at, seq LIMIT 1",
                [],
                |r| r.get(0),
            )
            .optional()?;
        let Some(job_id) = next else {
            tx.commit()?;
            return Ok(None);
        };
        tx.execute(
            "UPDATE jobs SET state = 'Running', lease_owner = ?2, lease_expiry = ?3, attempts = attempts + 1
             WHERE job_id = ?1",
            params![job_id, worker, now_ms + lease_ms],
        )?;
        let raw = tx.query_row(&format!("SELECT {JOB_COLUMNS} FROM jobs WHERE job_id = ?1"), params![job_id], job_from_row)?;
        let model_key: String = tx.query_row(
            "SELECT model_key FROM images WHERE image_id = ?1",
            params![raw.0.image_id],
            |r| r.get(0),
        )?;
        let raster = Self::raster_unscoped(&tx, &raw.0.image_id)?;
        tx.commit()?;
        Ok(Some(ClaimedJob {
            job: finish_job(raw)?,
            model_key,
            raster,
        }))
    }

    /// Extends a lease still held by `worker`; false when it was lost.
    pub fn renew_lease(&self, job_id: &str, worker: &str, lease_ms: i64, now_ms: i64) -> Result<bool, Error> {
        Ok(self.conn().execute(
            "UPDATE jobs SET lease_expiry = ?3 WHERE job_id = ?1 AND lease_owner = ?2 AND state = 'Running'",
            params![job_id, worker, now_ms + lease_ms],
        )? == 1)
    }

    /// Records a finished run. Writes are idempotent: the first result for a
    /// job wins, later deliveries of the same job leave it unchanged and
    /// return false. A run with annotations seeds version 0 of the image's
    /// annotation set if none exists yet.
    pub fn complete_job(&self, job_id: &str, result: &JobResult) -> Result<bool, Error> {
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let image_id: String = tx
            .query_row("SELECT image_id FROM jobs WHERE job_id = ?1", params![job_id], |r| r.get(0))
            .optional()?
            .ok_or(Error::NotFound)?;
        let annotations = serde_json::to_string(&result.annotations)?;
        let statuses = serde_json::to_string(&result.stage_statuses)?;
        let inserted = tx.execute(
            "INSERT OR IGNORE INTO job_results (job_id, state, annotations, chain, statuses) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![
                job_id,
                result.state.as_str(),
                annotations,
                result.chain.as_ref().map(serde_json::to_string).transpose()?,
                statuses
            ],
        )? == 1;
        if inserted {
            tx.execute(
                "UPDATE jobs SET state = ?2, statuses = ?3, lease_owner = NULL, lease_expiry = NULL WHERE job_id = ?1",
                params![job_id, result.state.as_str(), statuses],
            )?;
            if matches!(result.state, JobState::Done | JobState::Partial) {
                tx.execute(
                    "INSERT OR IGNORE INTO annotation_versions (image_id, version, annotations) VALUES (?1, 0, ?2)",
                    params![image_id, annotations],
                )?;
            }
        } else {
            // A duplicate delivery only releases a lease it may still hold.
            tx.execute(
                "UPDATE jobs SET lease_owner = NULL, lease_expiry = NULL WHERE job_id = ?1 AND state = 'Running'",
                params![job_id],
            )?;
        }
        tx.commit()?;
        Ok(inserted)
    }

    pub fn job_result(&self, job_id: &str) -> Result<Option<JobResult>, Error> {
        let row: Option<(String, String, Option<String>, String)> = self
            .conn()
            .query_row(
                "SELECT state, annotations, chain, statuses FROM job_results WHERE job_id = ?1",
                params![job_id],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)),
            )
            .optional()?;
        row.map(|(state, ann, chain, statuses)| {
            Ok(JobResult {
                state: state.parse().map_err(Error::Storage)?,
                annotations: serde_json::from_str(&ann)?,
                chain: chain.map(|c| serde_json::from_str(&c)).transpose()?,
                stage_statuses: serde_json::from_str(&statuses)?,
            })
        })
        .transpose()
    }

    /// Raw JSON of the stored annotations of a job result.
    pub fn job_result_json(&self, job_id: &str) -> Result<Option<String>, Error> {
        Ok(self
            .conn()
            .query_row("SELECT annotations FROM job_results WHERE job_id = ?1", params![job_id], |r| r.get(0))
            .optional()?)
    }

    pub fn counts_by_state(&self) -> Result<Vec<(JobState, u64)>, Error> {
        let conn = self.conn();
        let mut stmt = conn.prepare("SELECT state, COUNT(*) FROM jobs GROUP BY state ORDER BY state")?;
        let rows = stmt
            .query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?)))?
            .collect::<Result<Vec<_>, _>>()?;
        rows.into_iter()
            .map(|(s, n)| Ok((s.parse().map_err(Error::Storage)?, n as u64)))
            .collect()
    }

    fn current_version_in(conn: &Connection, image_id: &str) -> Result<Option<u64>, Error> {
        let v: Option<i64> = conn.query_row(
            "SELECT MAX(version) FROM annotation_versions WHERE image_id = ?1",
            params![image_id],
            |r| r.get(0),
        )?;
        Ok(v.map(|v| v as u64))
    }

    fn signoff_in(conn: &Connection, image_id: &str) -> Result<Option<Signoff>, Error> {
        Ok(conn
            .query_row(
                "SELECT user, version, ts FROM signoffs WHERE image_id = ?1",
                params![image_id],
                |r| {
                    Ok(Signoff {
                        user: r.get(0)?,
                        version: r.get::<_, i64>(1)? as u64,
                        timestamp: timestamp(r.get(2)?),
                    })
                },
            )
            .optional()?)
    }

    fn snapshot_json_in(conn: &Connection, image_id: &str, version: u64) -> Result<String, Error> {
        conn.query_row(
            "SELECT annotations FROM annotation_versions WHERE image_id = ?1 AND version = ?2",
            params![image_id, version as i64],
            |r| r.get(0),
        )
        .optional()?
        .ok_or(Error::UnknownVersion(version))
    }

    /// Latest version number, `None` before the first pipeline result.
    pub fn current_version(&self, image_id: &str) -> Result<Option<u64>, Error> {
        Self::current_version_in(&self.conn(), image_id)
    }

    pub fn signoff(&self, image_id: &str) -> Result<Option<Signoff>, Error> {
        Self::signoff_in(&self.conn(), image_id)
    }

    /// Stored snapshot JSON exactly as written.
    pub fn snapshot_json(&self, image_id: &str, version: u64) -> Result<String, Error> {
        Self::snapshot_json_in(&self.conn(), image_id, version)
    }

    pub fn snapshot(&self, image_id: &str, version: u64) -> Result<AnnotationSet, Error> {
        let conn = self.conn();
        let json = Self::snapshot_json_in(&conn, image_id, version)?;
        let signoff = Self::signoff_in(&conn, image_id)?.filter(|s| s.version == version);
        Ok(AnnotationSet {
            image_id: image_id.to_string(),
            version,
            annotations: serde_json::from_str(&json)?,
            signed_off: signoff.is_some(),
            signoff_user: signoff.map(|s| s.user),
        })
    }

    pub fn audit_events(&self, image_id: &str) -> Result<Vec<AuditEvent>, Error> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT event_id, image_id, tenant_id, actor, ts, edit, resulting_version
             FROM audit_events WHERE image_id = ?1 ORDER BY resulting_version",
        )?;
        let rows = stmt
            .query_map(params![image_id], |r| {
                Ok((
                    r.get::<_, i64>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, String>(3)?,
                    r.get::<_, i64>(4)?,
                    r.get::<_, String>(5)?,
                    r.get::<_, i64>(6)?,
                ))
            })?
            .collect::<Result<Vec<_>, _>>()?;
        rows.into_iter()
            .map(|(id, image_id, tenant_id, actor, ts, edit, v)| {
                Ok(AuditEvent {
                    event_id: id as u64,
                    image_id,
                    tenant_id,
                    actor,
                    timestamp: timestamp(ts),
                    edit: serde_json::from_str(&edit)?,
                    resulting_version: v as u64,
                })
            })
            .collect()
    }

    /// Appends one edit atomically: checks sign-off and the expected
    /// version, applies `apply` to the current snapshot, then writes the new
    /// snapshot and its audit event in the same transaction.
    #[allow(clippy::too_many_arguments)]
    pub fn commit_edit(
        &self,
        tenant_id: &str,
        image_id: &str,
        actor: &str,
        edit: &Edit,
        expected_version: u64,
        now_ms: i64,
        apply: impl FnOnce(&[Annotation]) -> Result<Vec<Annotation>, Error>,
    ) -> Result<(AnnotationSet, AuditEvent), Error> {
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        if Self::signoff_in(&tx, image_id)?.is_some() {
            return Err(Error::SignedOffImmutable);
        }
        let current = Self::current_version_in(&tx, image_id)?.ok_or(Error::NotReady)?;
        if current != expected_version {
            return Err(Error::VersionConflict {
                expected: expected_version,
                current,
            });
        }
        let before: Vec<Annotation> = serde_json::from_str(&Self::snapshot_json_in(&tx, image_id, current)?)?;
        let after = apply(&before)?;
        let version = current + 1;
        tx.execute(
            "INSERT INTO annotation_versions (image_id, version, annotations) VALUES (?1, ?2, ?3)",
            params![image_id, version as i64, serde_json::to_string(&after)?],
        )?;
        tx.execute(
            "INSERT INTO audit_events (image_id, tenant_id, actor, ts, edit, resulting_version)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![image_id, tenant_id, actor, now_ms, serde_json::to_string(edit)?, version as i64],
        )?;
        let event_id = tx.last_insert_rowid() as u64;
        tx.commit()?;
        Ok((
            AnnotationSet {
                image_id: image_id.to_string(),
                version,
                annotations: after,
                signed_off: false,
                signoff_user: None,
            },
            AuditEvent {
                event_id,
                image_id: image_id.to_string(),
                tenant_id: tenant_id.to_string(),
                actor: actor.to_string(),
                timestamp: timestamp(now_ms),
                edit: edit.clone(),
                resulting_version: version,
            },
        ))
    }

    /// Freezes the current version. Signing twice is rejected.
    pub fn sign_off(&self, tenant_id: &str, image_id: &str, user: &str, expected_version: Option<u64>, now_ms: i64) -> Result<Signoff, Error> {
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        if Self::signoff_in(&tx, image_id)?.is_some() {
            return Err(Error::SignedOffImmutable);
        }
        let current = Self::current_version_in(&tx, image_id)?.ok_or(Error::NotReady)?;
        if let Some(expected) = expected_version.filter(|e| *e != current) {
            return Err(Error::VersionConflict { expected, current });
        }
        tx.execute(
            "INSERT INTO signoffs (image_id, tenant_id, user, version, ts) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![image_id, tenant_id, user, current as i64, now_ms],
        )?;
        tx.commit()?;
        Ok(Signoff {
            user: user.to_string(),
            version: current,
            timestamp: timestamp(now_ms),
        })
    }
}
