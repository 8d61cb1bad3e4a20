use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use kayra_core::cascade::Annotation;

use crate::auth::{Principal, TokenFile};
use crate::edits::{self, Edit};
use crate::filename::parse_filename;
use crate::ingest::{decode_grayscale, encode_png};
use crate::iscn::{iscn_suggest, IscnSuggestion};
use crate::karyogram::{compose_karyogram, render_karyogram, KaryogramLayout};
use crate::store::{AnnotationSet, AuditEvent, ImageRecord, Job, Store};
use crate::Error;

pub fn now_ms() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as i64)
}

/// Tenant-scoped operations. Any resource owned by another tenant is
/// reported as not found.
pub struct Backend {
    store: Arc<Store>,
    tokens: TokenFile,
}

impl Backend {
    pub fn new(store: Arc<Store>, tokens: TokenFile) -> Result<Self, Error> {
        for (id, name) in tokens.tenant_ids() {
            store.upsert_tenant(&id, &name)?;
        }
        Ok(Self { store, tokens })
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn authenticate(&self, bearer: &str) -> Result<Principal, Error> {
        self.tokens.resolve(bearer).ok_or(Error::Unauthorized)
    }

    pub fn ingest(&self, p: &Principal, filename: &str, bytes: &[u8]) -> Result<ImageRecord, Error> {
        let raster = decode_grayscale(bytes)?;
        let base = filename.rsplit(['/', '\\']).next().unwrap_or(filename);
        let model_key = Path::new(base)
            .file_stem()
            .and_then(|s| s.to_str())
            .filter(|s| !s.is_empty())
            .unwrap_or("image")
            .to_string();
        let rec = ImageRecord {
            image_id: uuid::Uuid::new_v4().to_string(),
            tenant_id: p.tenant_id.clone(),
            filename: base.to_string(),
            model_key,
            width: raster.width(),
            height: raster.height(),
            clinical: parse_filename(base),
            ingested_at: chrono::DateTime::from_timestamp_millis(now_ms()).unwrap_or_default(),
        };
        self.store.insert_image(&rec, &raster)?;
        tracing::info!(image_id = %rec.image_id, tenant = %p.tenant_id, "ingested {}", rec.filename);
        Ok(rec)
    }

    pub fn image(&self, p: &Principal, image_id: &str) -> Result<ImageRecord, Error> {
        self.store.image(&p.tenant_id, image_id)
    }

    pub fn image_png(&self, p: &Principal, image_id: &str) -> Result<Vec<u8>, Error> {
        Ok(encode_png(&self.store.image_raster(&p.tenant_id, image_id)?))
    }

    pub fn submit_job(&self, p: &Principal, image_id: &str) -> Result<Job, Error> {
        self.store
            .create_job(&uuid::Uuid::new_v4().to_string(), &p.tenant_id, image_id, now_ms())
    }

    pub fn job(&self, p: &Principal, job_id: &str) -> Result<Job, Error> {
        self.store.job(&p.tenant_id, job_id)
    }

    fn resolve_version(&self, image_id: &str, version: Option<u64>) -> Result<u64, Error> {
        let current = self.store.current_version(image_id)?.ok_or(Error::NotReady)?;
        match version {
            Some(v) if v > current => Err(Error::UnknownVersion(v)),
            Some(v) => Ok(v),
            None => Ok(current),
        }
    }

    /// Stored snapshot at `version`, the latest when `None`.
    pub fn annotations(&self, p: &Principal, image_id: &str, version: Option<u64>) -> Result<AnnotationSet, Error> {
        self.image(p, image_id)?;
        let v = self.resolve_version(image_id, version)?;
        self.store.snapshot(image_id, v)
    }

    pub fn apply_edit(
        &self,
        p: &Principal,
        image_id: &str,
        edit: &Edit,
        expected_version: u64,
    ) -> Result<(AnnotationSet, AuditEvent), Error> {
        let img = self.image(p, image_id)?;
        self.store
            .commit_edit(&p.tenant_id, image_id, &p.user, edit, expected_version, now_ms(), |set| {
                edits::apply(set, edit, img.width, img.height)
            })
    }

    pub fn audit(&self, p: &Principal, image_id: &str) -> Result<Vec<AuditEvent>, Error> {
        self.image(p, image_id)?;
        self.store.audit_events(image_id)
    }

    /// Rebuilds version `up_to` by folding audit events 1..=up_to over the
    /// pipeline's version 0, independently of the stored snapshots.
    pub fn replay_audit(&self, p: &Principal, image_id: &str, up_to: u64) -> Result<AnnotationSet, Error> {
        let img = self.image(p, image_id)?;
        let current = self.store.current_version(image_id)?.ok_or(Error::NotReady)?;
        if up_to > current {
            return Err(Error::UnknownVersion(up_to));
        }
        let mut set: Vec<Annotation> = serde_json::from_str(&self.store.snapshot_json(image_id, 0)?)?;
        for ev in self.store.audit_events(image_id)?.iter().take_while(|e| e.resulting_version <= up_to) {
            set = edits::apply(&set, &ev.edit, img.width, img.height)?;
        }
        let signoff = self.store.signoff(image_id)?.filter(|s| s.version == up_to);
        Ok(AnnotationSet {
            image_id: image_id.to_string(),
            version: up_to,
            annotations: set,
            signed_off: signoff.is_some(),
            signoff_user: signoff.map(|s| s.user),
        })
    }

    pub fn sign_off(&self, p: &Principal, image_id: &str, expected_version: Option<u64>) -> Result<AnnotationSet, Error> {
        self.image(p, image_id)?;
        let s = self.store.sign_off(&p.tenant_id, image_id, &p.user, expected_version, now_ms())?;
        self.store.snapshot(image_id, s.version)
    }

    pub fn karyogram_layout(&self, p: &Principal, image_id: &str, version: Option<u64>) -> Result<KaryogramLayout, Error> {
        Ok(compose_karyogram(&self.annotations(p, image_id, version)?.annotations))
    }

    pub fn karyogram_png(&self, p: &Principal, image_id: &str, version: Option<u64>) -> Result<Vec<u8>, Error> {
        let set = self.annotations(p, image_id, version)?;
        let raster = self.store.image_raster(&p.tenant_id, image_id)?;
        Ok(encode_png(&render_karyogram(&set.annotations, &raster)))
    }

    pub fn iscn(&self, p: &Principal, image_id: &str, version: Option<u64>) -> Result<IscnSuggestion, Error> {
        Ok(iscn_suggest(&self.annotations(p, image_id, version)?.annotations))
    }
}
