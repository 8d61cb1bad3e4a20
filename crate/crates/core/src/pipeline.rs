//! Drives the eight cascade stages against a set of model backends,
//! recording one status per stage and applying the degraded-mode fallbacks.
//!
//! | failing stage        | fallback                                   | job     |
//! |----------------------|--------------------------------------------|---------|
//! | Prefilter            | none                                       | Failed  |
//! | SemSeg               | crop2 = crop1, semantic check skipped      | Partial |
//! | MaskCrop             | crop2 = crop1, semantic check skipped      | Partial |
//! | Instance45           | 0° detections only                         | Partial |
//! | Instance0            | 45° detections only                        | Partial |
//! | Instance0 and 45     | none                                       | Failed  |
//! | Dedup                | merged detections passed through raw       | Partial |
//! | Classify             | all Unknown, uniform probs, upright        | Partial |
//! | BackTransform        | none                                       | Failed  |

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{
    argmax, mask_bbox_crop, prefilter_crop, prepare_semseg_input, two_angle_merge, uniform_probs,
    upscale_semantic, Annotation, CascadeParams, ClassLabel, Detection, RoiChain, Rotation,
    SemanticMask,
};
use crate::imaging::polygon::{largest_component, trace_boundary};
use crate::imaging::{rotate_expand, Raster, Rect};
use crate::protocol::{
    decode_detections, encode_detections, AngleTag, ClassifyRequest, ClassifyResponse, DedupParams,
    DedupRequest, DedupResponse, InstanceRequest, InstanceResponse, ModelService, ProtocolError,
    RleMask, SemSegRequest, SemSegResponse, SemSegRoi, WireDetection,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Prefilter,
    SemSeg,
    MaskCrop,
    Instance0,
    Instance45,
    Dedup,
    Classify,
    BackTransform,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Prefilter,
        Stage::SemSeg,
        Stage::MaskCrop,
        Stage::Instance0,
        Stage::Instance45,
        Stage::Dedup,
        Stage::Classify,
        Stage::BackTransform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prefilter => "Prefilter",
            Stage::SemSeg => "SemSeg",
            Stage::MaskCrop => "MaskCrop",
            Stage::Instance0 => "Instance0",
            Stage::Instance45 => "Instance45",
            Stage::Dedup => "Dedup",
            Stage::Classify => "Classify",
            Stage::BackTransform => "BackTransform",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageOutcome {
    Ok,
    Degraded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: Stage,
    pub outcome: StageOutcome,
    pub latency_ms: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobState {
    Queued,
    Running,
    Done,
    Partial,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Partial | JobState::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "Queued",
            JobState::Running => "Running",
            JobState::Done => "Done",
            JobState::Partial => "Partial",
            JobState::Failed => "Failed",
        }
    }
}

impl std::str::FromStr for JobState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            JobState::Queued,
            JobState::Running,
            JobState::Done,
            JobState::Partial,
            JobState::Failed,
        ]
        .into_iter()
        .find(|st| st.as_str() == s)
        .ok_or_else(|| format!("unknown job state {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("service unavailable: {0}")]
    Unavailable(String),
    #[error("timed out after {0} ms")]
    Timeout(u64),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl From<ProtocolError> for BackendError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::UnknownImageId(_) | ProtocolError::InvalidRequest(_) => {
                BackendError::Rejected(e.to_string())
            }
            _ => BackendError::Protocol(e.to_string()),
        }
    }
}

/// Client side of the four model contracts. Implementations must be safe
/// to call from concurrent runs.
pub trait StageBackends: Send + Sync {
    fn semseg(&self, req: &SemSegRequest) -> Result<SemSegResponse, BackendError>;
    fn instances(&self, req: &InstanceRequest) -> Result<InstanceResponse, BackendError>;
    fn dedup(&self, req: &DedupRequest) -> Result<DedupResponse, BackendError>;
    fn classify(&self, req: &ClassifyRequest) -> Result<ClassifyResponse, BackendError>;

    /// Called before each in-process stage (Prefilter, MaskCrop,
    /// BackTransform); an error fails that stage.
    fn check_local_stage(&self, _stage: Stage) -> Result<(), BackendError> {
        Ok(())
    }
}

impl<B: StageBackends + ?Sized> StageBackends for &B {
    fn semseg(&self, req: &SemSegRequest) -> Result<SemSegResponse, BackendError> {
        (**self).semseg(req)
    }
    fn instances(&self, req: &InstanceRequest) -> Result<InstanceResponse, BackendError> {
        (**self).instances(req)
    }
    fn dedup(&self, req: &DedupRequest) -> Result<DedupResponse, BackendError> {
        (**self).dedup(req)
    }
    fn classify(&self, req: &ClassifyRequest) -> Result<ClassifyResponse, BackendError> {
        (**self).classify(req)
    }
    fn check_local_stage(&self, stage: Stage) -> Result<(), BackendError> {
        (**self).check_local_stage(stage)
    }
}

impl<B: StageBackends + ?Sized> StageBackends for Box<B> {
    fn semseg(&self, req: &SemSegRequest) -> Result<SemSegResponse, BackendError> {
        (**self).semseg(req)
    }
    fn instances(&self, req: &InstanceRequest) -> Result<InstanceResponse, BackendError> {
        (**self).instances(req)
    }
    fn dedup(&self, req: &DedupRequest) -> Result<DedupResponse, BackendError> {
        (**self).dedup(req)
    }
    fn classify(&self, req: &ClassifyRequest) -> Result<ClassifyResponse, BackendError> {
        (**self).classify(req)
    }
    fn check_local_stage(&self, stage: Stage) -> Result<(), BackendError> {
        (**self).check_local_stage(stage)
    }
}

/// Serves every stage from one in-process model service.
#[derive(Debug, Clone)]
pub struct InProcess<M>(pub M);

impl<M: ModelService> StageBackends for InProcess<M> {
    fn semseg(&self, req: &SemSegRequest) -> Result<SemSegResponse, BackendError> {
        Ok(self.0.semseg(req)?)
    }
    fn instances(&self, req: &InstanceRequest) -> Result<InstanceResponse, BackendError> {
        Ok(self.0.instances(req)?)
    }
    fn dedup(&self, req: &DedupRequest) -> Result<DedupResponse, BackendError> {
        Ok(self.0.dedup(req)?)
    }
    fn classify(&self, req: &ClassifyRequest) -> Result<ClassifyResponse, BackendError> {
        Ok(self.0.classify(req)?)
    }
}

/// Retries every failed remote call up to `retries` extra times.
#[derive(Debug, Clone)]
pub struct Retrying<B> {
    pub inner: B,
    pub retries: usize,
}

impl<B> Retrying<B> {
    pub fn new(inner: B, retries: usize) -> Self {
        Self { inner, retries }
    }

    fn call<T>(&self, mut f: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut last = f();
        for _ in 0..self.retries {
            if last.is_ok() {
                break;
            }
            last = f();
        }
        last
    }
}

impl<B: StageBackends> StageBackends for Retrying<B> {
    fn semseg(&self, req: &SemSegRequest) -> Result<SemSegResponse, BackendError> {
        self.call(|| self.inner.semseg(req))
    }
    fn instances(&self, req: &InstanceRequest) -> Result<InstanceResponse, BackendError> {
        self.call(|| self.inner.instances(req))
    }
    fn dedup(&self, req: &DedupRequest) -> Result<DedupResponse, BackendError> {
        self.call(|| self.inner.dedup(req))
    }
    fn classify(&self, req: &ClassifyRequest) -> Result<ClassifyResponse, BackendError> {
        self.call(|| self.inner.classify(req))
    }
    fn check_local_stage(&self, stage: Stage) -> Result<(), BackendError> {
        self.inner.check_local_stage(stage)
    }
}

/// Makes the listed stages fail with `Unavailable` and counts every call
/// that reaches each stage.
#[derive(Debug)]
pub struct FaultInjector<B> {
    pub inner: B,
    faults: BTreeSet<Stage>,
    calls: [AtomicUsize; 8],
}

impl<B> FaultInjector<B> {
    pub fn new(inner: B, faults: impl IntoIterator<Item = Stage>) -> Self {
        Self {
            inner,
            faults: faults.into_iter().collect(),
            calls: Default::default(),
        }
    }

    pub fn faults(&self) -> &BTreeSet<Stage> {
        &self.faults
    }

    pub fn calls(&self, stage: Stage) -> usize {
        self.calls[stage as usize].load(Ordering::SeqCst)
    }

    fn gate(&self, stage: Stage) -> Result<(), BackendError> {
        self.calls[stage as usize].fetch_add(1, Ordering::SeqCst);
        if self.faults.contains(&stage) {
            Err(BackendError::Unavailable(format!("{stage} fault injected")))
        } else {
            Ok(())
        }
    }
}

impl<B: StageBackends> StageBackends for FaultInjector<B> {
    fn semseg(&self, req: &SemSegRequest) -> Result<SemSegResponse, BackendError> {
        self.gate(Stage::SemSeg)?;
        self.inner.semseg(req)
    }
    fn instances(&self, req: &InstanceRequest) -> Result<InstanceResponse, BackendError> {
        self.gate(match req.angle_tag {
            AngleTag::Zero => Stage::Instance0,
            AngleTag::FortyFive => Stage::Instance45,
        })?;
        self.inner.instances(req)
    }
    fn dedup(&self, req: &DedupRequest) -> Result<DedupResponse, BackendError> {
        self.gate(Stage::Dedup)?;
        self.inner.dedup(req)
    }
    fn classify(&self, req: &ClassifyRequest) -> Result<ClassifyResponse, BackendError> {
        self.gate(Stage::Classify)?;
        self.inner.classify(req)
    }
    fn check_local_stage(&self, stage: Stage) -> Result<(), BackendError> {
        self.gate(stage)?;
        self.inner.check_local_stage(stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeRun {
    pub state: JobState,
    pub annotations: Vec<Annotation>,
    pub chain: Option<RoiChain>,
    pub statuses: Vec<StageStatus>,
    pub total_ms: f64,
}

impl CascadeRun {
    pub fn status(&self, stage: Stage) -> &StageStatus {
        self.statuses
            .iter()
            .find(|s| s.stage == stage)
            .expect("every stage has a status")
    }

    /// Summed latency of Ok stages, with the concurrent angle pair counted
    /// by its slower member.
    pub fn ok_latency_ms(&self) -> f64 {
        let ok = |st: Stage| {
            let s = self.status(st);
            if s.outcome == StageOutcome::Ok {
                s.latency_ms
            } else {
                0.0
            }
        };
        let sequential: f64 = Stage::ALL
            .into_iter()
            .filter(|s| !matches!(s, Stage::Instance0 | Stage::Instance45))
            .map(ok)
            .sum();
        sequential + ok(Stage::Instance0).max(ok(Stage::Instance45))
    }
}

struct Recorder {
    statuses: Vec<Option<StageStatus>>,
}

impl Recorder {
    fn new() -> Self {
        Self {
            statuses: vec![None; Stage::ALL.len()],
        }
    }

    fn record(&mut self, stage: Stage, outcome: StageOutcome, started: Instant, detail: impl Into<String>) {
        self.statuses[stage as usize] = Some(StageStatus {
            stage,
            outcome,
            latency_ms: started.elapsed().as_secs_f64() * 1000.0,
            detail: detail.into(),
        });
    }

    fn record_ms(&mut self, stage: Stage, outcome: StageOutcome, latency_ms: f64, detail: impl Into<String>) {
        self.statuses[stage as usize] = Some(StageStatus {
            stage,
            outcome,
            latency_ms,
            detail: detail.into(),
        });
    }

    fn skip_rest(&mut self) {
        for stage in Stage::ALL {
            if self.statuses[stage as usize].is_none() {
                self.record_ms(stage, StageOutcome::Failed, 0.0, "skipped");
            }
        }
    }

    fn finish(self) -> Vec<StageStatus> {
        self.statuses
            .into_iter()
            .map(|s| s.expect("all stages recorded"))
            .collect()
    }
}

fn decode_in_frame(dets: &[WireDetection], frame: (usize, usize)) -> Result<Vec<Detection>, BackendError> {
    let decoded = decode_detections(dets)?;
    let bounds = Rect::new(0, 0, frame.0, frame.1);
    if let Some(d) = decoded.iter().find(|d| !bounds.contains_rect(&d.bbox())) {
        return Err(BackendError::Protocol(format!(
            "detection {:?} outside the {}x{} frame",
            d.bbox(),
            frame.0,
            frame.1
        )));
    }
    Ok(decoded)
}

fn failed_run(rec: Recorder, chain: Option<RoiChain>, started: Instant) -> CascadeRun {
    let mut rec = rec;
    rec.skip_rest();
    CascadeRun {
        state: JobState::Failed,
        annotations: Vec::new(),
        chain,
        statuses: rec.finish(),
        total_ms: started.elapsed().as_secs_f64() * 1000.0,
    }
}

/// Runs stages 1–8 for one image. Never panics on backend failures; the
/// outcome is carried in the returned state and statuses.
pub fn run_cascade(
    image_id: &str,
    original: &Raster,
    params: &CascadeParams,
    backends: &dyn StageBackends,
) -> CascadeRun {
    let run_start = Instant::now();
    let mut rec = Recorder::new();

    // Stage 1.
    let t = Instant::now();
    let crop1 = match backends
        .check_local_stage(Stage::Prefilter)
        .map_err(|e| e.to_string())
        .and_then(|_| prefilter_crop(original, params).map_err(|e| format!("{e:?}: {e}")))
    {
        Ok(c) => {
            rec.record(Stage::Prefilter, StageOutcome::Ok, t, format!("crop1 {c:?}"));
            c
        }
        Err(e) => {
            rec.record(Stage::Prefilter, StageOutcome::Failed, t, e);
            return failed_run(rec, None, run_start);
        }
    };

    // Stage 2–3.
    let t = Instant::now();
    let semseg = prepare_semseg_input(original, &crop1, params)
        .map_err(|e| BackendError::Rejected(e.to_string()))
        .and_then(|(input, scale)| {
            let resp = backends.semseg(&SemSegRequest {
                image_id: image_id.to_string(),
                image: input,
                roi: Some(SemSegRoi { crop1, scale }),
            })?;
            let mask = resp.mask.decode()?;
            if (mask.width(), mask.height()) != (params.semseg_canvas, params.semseg_canvas) {
                return Err(BackendError::Protocol(format!(
                    "semantic mask is {}x{}, expected {}x{}",
                    mask.width(),
                    mask.height(),
                    params.semseg_canvas,
                    params.semseg_canvas
                )));
            }
            Ok((mask, scale, resp.warning))
        });
    let (semantic, scale): (Option<SemanticMask>, f64) = match semseg {
        Ok((mask, scale, warning)) => {
            rec.record(Stage::SemSeg, StageOutcome::Ok, t, warning.unwrap_or_default());
            (Some(mask), scale)
        }
        Err(e) => {
            rec.record(Stage::SemSeg, StageOutcome::Degraded, t, format!("{e}; crop2 = crop1"));
            let scale = crate::imaging::constrained_scale(crop1.w, crop1.h, params.semseg_min_dim, params.semseg_max_dim);
            (None, scale)
        }
    };

    // Stage 4.
    let t = Instant::now();
    let (crop2, semantic) = match semantic {
        None => {
            rec.record(Stage::MaskCrop, StageOutcome::Degraded, t, "no semantic mask; crop2 = crop1");
            (crop1, None)
        }
        Some(sem) => match backends
            .check_local_stage(Stage::MaskCrop)
            .map_err(|e| e.to_string())
            .and_then(|_| mask_bbox_crop(&sem, &crop1, scale, params).map_err(|e| e.to_string()))
        {
            Ok(c) => {
                rec.record(Stage::MaskCrop, StageOutcome::Ok, t, format!("crop2 {c:?}"));
                (c, Some(sem))
            }
            Err(e) => {
                rec.record(Stage::MaskCrop, StageOutcome::Degraded, t, format!("{e}; crop2 = crop1"));
                (crop1, None)
            }
        },
    };
    let chain = RoiChain {
        image_width: original.width(),
        image_height: original.height(),
        crop1,
        semseg_scale: scale,
        semseg_pad_offset: (0, 0),
        crop2,
    };
    debug_assert!(chain.is_consistent());

    // Stage 5.
    let crop2_img = original.crop(&crop2).expect("crop2 lies inside the image");
    let (rotated, rot45) = rotate_expand(&crop2_img, 45.0);
    let frame = (crop2.w, crop2.h);
    let rotated_frame = rotated.dims();
    let instance_req = |image: Raster, angle_tag| InstanceRequest {
        image_id: image_id.to_string(),
        image,
        angle_tag,
        roi: Some(crop2),
        min_area: None,
    };
    let req0 = instance_req(crop2_img.clone(), AngleTag::Zero);
    let req45 = instance_req(rotated, AngleTag::FortyFive);
    let call = |req: &InstanceRequest, frame| {
        let t = Instant::now();
        let out = backends
            .instances(req)
            .and_then(|r| decode_in_frame(&r.detections, frame));
        (out, t.elapsed().as_secs_f64() * 1000.0)
    };
    let ((res0, ms0), (res45, ms45)) = std::thread::scope(|s| {
        let h45 = s.spawn(|| call(&req45, rotated_frame));
        let r0 = call(&req0, frame);
        (r0, h45.join().expect("instance call panicked"))
    });
    let (dets0, dets45) = match (res0, res45) {
        (Err(e0), Err(e45)) => {
            rec.record_ms(Stage::Instance0, StageOutcome::Failed, ms0, e0.to_string());
            rec.record_ms(Stage::Instance45, StageOutcome::Failed, ms45, e45.to_string());
            return failed_run(rec, Some(chain), run_start);
        }
        (Ok(d0), Err(e45)) => {
            rec.record_ms(Stage::Instance0, StageOutcome::Ok, ms0, format!("{} detections", d0.len()));
            rec.record_ms(Stage::Instance45, StageOutcome::Degraded, ms45, format!("{e45}; 0° detections only"));
            (d0, Vec::new())
        }
        (Err(e0), Ok(d45)) => {
            rec.record_ms(Stage::Instance0, StageOutcome::Degraded, ms0, format!("{e0}; 45° detections only"));
            rec.record_ms(Stage::Instance45, StageOutcome::Ok, ms45, format!("{} detections", d45.len()));
            (Vec::new(), d45)
        }
        (Ok(d0), Ok(d45)) => {
            rec.record_ms(Stage::Instance0, StageOutcome::Ok, ms0, format!("{} detections", d0.len()));
            rec.record_ms(Stage::Instance45, StageOutcome::Ok, ms45, format!("{} detections", d45.len()));
            (d0, d45)
        }
    };
    let merged = two_angle_merge(dets0, dets45, &rot45, frame, params);

    // Stage 6.
    let t = Instant::now();
    let sem_up = semantic.as_ref().map(|s| upscale_semantic(s, &chain));
    let dedup = backends
        .dedup(&DedupRequest {
            image_id: image_id.to_string(),
            frame,
            detections: encode_detections(&merged),
            semantic: sem_up.as_ref().map(RleMask::encode),
            params: DedupParams::from(params),
        })
        .and_then(|r| decode_in_frame(&r.detections, frame));
    let dets = match dedup {
        Ok(d) => {
            rec.record(Stage::Dedup, StageOutcome::Ok, t, format!("{} -> {} detections", merged.len(), d.len()));
            d
        }
        Err(e) => {
            rec.record(Stage::Dedup, StageOutcome::Degraded, t, format!("{e}; raw merged detections kept"));
            merged
        }
    };
    let mut dets: Vec<Detection> = dets
        .into_iter()
        .filter_map(|d| Detection::new(largest_component(&d.mask)?, d.score))
        .collect();
    dets.sort_by_key(|d| {
        let b = d.bbox();
        (b.y0, b.x0, b.h, b.w)
    });

    // Stage 7.
    let t = Instant::now();
    let classified: Result<Vec<_>, BackendError> = dets
        .iter()
        .map(|d| classify_one(image_id, &crop2_img, &crop2, d, params, backends))
        .collect();
    let labels = match classified {
        Ok(l) => {
            let second = l.iter().filter(|c| c.second_pass).count();
            rec.record(Stage::Classify, StageOutcome::Ok, t, format!("{} classified, {second} second passes", l.len()));
            l
        }
        Err(e) => {
            rec.record(Stage::Classify, StageOutcome::Degraded, t, format!("{e}; all Unknown"));
            dets.iter()
                .map(|_| Classified {
                    label: ClassLabel::Unknown,
                    probs: uniform_probs(),
                    rotation: Rotation::UPRIGHT,
                    second_pass: false,
                })
                .collect()
        }
    };

    // Stage 8.
    let t = Instant::now();
    if let Err(e) = backends.check_local_stage(Stage::BackTransform) {
        rec.record(Stage::BackTransform, StageOutcome::Failed, t, e.to_string());
        return failed_run(rec, Some(chain), run_start);
    }
    let annotations: Vec<Annotation> = dets
        .iter()
        .zip(labels)
        .filter_map(|(d, c)| {
            let polygon = trace_boundary(&d.mask)?.translated(crop2.x0 as f64, crop2.y0 as f64);
            Some((polygon, d.score, c))
        })
        .enumerate()
        .map(|(i, (polygon, score, c))| Annotation {
            id: i as u32 + 1,
            polygon,
            class_label: c.label,
            class_probs: c.probs,
            rotation: c.rotation,
            score,
            user_asserted: false,
        })
        .collect();
    rec.record(Stage::BackTransform, StageOutcome::Ok, t, format!("{} annotations", annotations.len()));

    let statuses = rec.finish();
    let degraded = statuses.iter().any(|s| s.outcome == StageOutcome::Degraded);
    let state = match (degraded, annotations.is_empty()) {
        (false, _) => JobState::Done,
        (true, false) => JobState::Partial,
        (true, true) => JobState::Failed,
    };
    CascadeRun {
        state,
        annotations,
        chain: Some(chain),
        statuses,
        total_ms: run_start.elapsed().as_secs_f64() * 1000.0,
    }
}

struct Classified {
    label: ClassLabel,
    probs: Vec<f64>,
    rotation: Rotation,
    second_pass: bool,
}

fn classify_one(
    image_id: &str,
    crop2_img: &Raster,
    crop2: &Rect,
    det: &Detection,
    params: &CascadeParams,
    backends: &dyn StageBackends,
) -> Result<Classified, BackendError> {
    let bbox = det.bbox();
    let patch = Raster::from_fn(bbox.w, bbox.h, |x, y| {
        if det.mask.contains(bbox.x0 + x, bbox.y0 + y) {
            crop2_img.get(bbox.x0 + x, bbox.y0 + y)
        } else {
            255
        }
    });
    let mut req = ClassifyRequest {
        image_id: image_id.to_string(),
        patch,
        mask: RleMask::encode(&det.mask.mask),
        origin: Some((crop2.x0 + bbox.x0, crop2.y0 + bbox.y0)),
        augmented: false,
    };
    let first = backends.classify(&req)?;
    first.validate()?;
    let top = |p: &[f64]| argmax(p).map(|i| (i, p[i]));
    let (mut probs, mut rotation) = (first.class_probs.clone(), first.rotation().normalized());
    let mut second_pass = false;
    if top(&probs).is_none_or(|(_, p)| p < params.unknown_min_prob) {
        req.augmented = true;
        let second = backends.classify(&req)?;
        second.validate()?;
        second_pass = true;
        for (a, b) in probs.iter_mut().zip(&second.class_probs) {
            *a = 0.5 * (*a + b);
        }
        let r2 = second.rotation();
        let sum = Rotation {
            sin: rotation.sin + r2.sin,
            cos: rotation.cos + r2.cos,
        };
        if sum.sin.hypot(sum.cos) > 1e-9 {
            rotation = sum.normalized();
        }
    }
    let label = match top(&probs) {
        Some((i, p)) if p >= params.unknown_min_prob => ClassLabel::from_index(i).expect("24 slots"),
        _ => ClassLabel::Unknown,
    };
    Ok(Classified {
        label,
        probs,
        rotation,
        second_pass,
    })
}

/// In-process stage backends for a model service, wrapped with the default
/// single retry.
pub fn in_process<M: ModelService>(model: M) -> Retrying<InProcess<M>> {
    Retrying::new(InProcess(model), 1)
}
