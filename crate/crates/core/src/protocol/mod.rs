//! Wire contracts of the four model services and their in-process
//! implementations: classical stubs and a ground-truth oracle.
//!
//! Every request/response is plain JSON. Rasters travel as base64 bytes,
//! binary masks as run-length encodings over the bbox window of the object
//! they describe, and the semantic mask as `(class, run)` pairs.

mod oracle;
mod rle;
mod stubs;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{CascadeParams, Detection, Rotation, NUM_CLASSES};
use crate::imaging::{Raster, Rect, RegionMask};

pub use oracle::{GroundTruthRegistry, OracleModels, OracleNoise};
pub use rle::{ClassRuns, RegionRle, RleMask};
pub use stubs::{principal_axis_degrees, stub_classify, stub_instances, stub_semseg, StubModels};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("invalid run-length encoding: {0}")]
    InvalidRle(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("unknown image id {0:?}")]
    UnknownImageId(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
}

/// The region of the original image the semantic input was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemSegRoi {
    pub crop1: Rect,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemSegRequest {
    pub image_id: String,
    pub image: Raster,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<SemSegRoi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemSegResponse {
    pub mask: ClassRuns,
    pub model_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub enum AngleTag {
    Zero,
    FortyFive,
}

impl AngleTag {
    pub fn degrees(self) -> f64 {
        match self {
            AngleTag::Zero => 0.0,
            AngleTag::FortyFive => 45.0,
        }
    }
}

impl From<AngleTag> for u16 {
    fn from(a: AngleTag) -> u16 {
        match a {
            AngleTag::Zero => 0,
            AngleTag::FortyFive => 45,
        }
    }
}

impl TryFrom<u16> for AngleTag {
    type Error = String;

    fn try_from(v: u16) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(AngleTag::Zero),
            45 => Ok(AngleTag::FortyFive),
            other => Err(format!("angle_tag must be 0 or 45, got {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRequest {
    pub image_id: String,
    /// crop2, rotated by `angle_tag` degrees onto an expanded canvas.
    pub image: Raster,
    pub angle_tag: AngleTag,
    /// crop2 in original coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_area: Option<usize>,
}

/// Detection on the wire: tight bbox, RLE of the bbox window, score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub bbox: Rect,
    pub rle: RleMask,
    pub score: f64,
}

impl WireDetection {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            bbox: d.bbox(),
            rle: RleMask::encode(&d.mask.mask),
            score: d.score,
        }
    }

    pub fn to_detection(&self) -> Result<Detection, ProtocolError> {
        if self.rle.width != self.bbox.w || self.rle.height != self.bbox.h {
            return Err(ProtocolError::InvalidResponse("rle dims differ from bbox".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(ProtocolError::InvalidResponse(format!("score {} outside [0, 1]", self.score)));
        }
        let mask = RegionMask::new((self.bbox.x0, self.bbox.y0), self.rle.decode()?);
        if mask.mask.tight_bbox().map(|b| (b.w, b.h)) != Some((self.bbox.w, self.bbox.h)) {
            return Err(ProtocolError::InvalidResponse("bbox is not tight around its mask".into()));
        }
        Detection::new(mask, self.score).ok_or(ProtocolError::EmptyMask)
    }
}

pub fn encode_detections(dets: &[Detection]) -> Vec<WireDetection> {
    dets.iter().map(WireDetection::from_detection).collect()
}

pub fn decode_detections(dets: &[WireDetection]) -> Result<Vec<Detection>, ProtocolError> {
    dets.iter().map(WireDetection::to_detection).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResponse {
    pub detections: Vec<WireDetection>,
    pub model_version: String,
}

/// Thresholds forwarded to the duplicate-resolution service.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DedupParams {
    pub merge_iou: f64,
    pub dedup_center_dist: f64,
    pub semantic_agreement_min: f64,
}

impl From<&CascadeParams> for DedupParams {
    fn from(p: &CascadeParams) -> Self {
        Self {
            merge_iou: p.merge_iou,
            dedup_center_dist: p.dedup_center_dist,
            semantic_agreement_min: p.semantic_agreement_min,
        }
    }
}

impl DedupParams {
    pub fn apply_to(&self, base: &CascadeParams) -> CascadeParams {
        CascadeParams {
            merge_iou: self.merge_iou,
            dedup_center_dist: self.dedup_center_dist,
            semantic_agreement_min: self.semantic_agreement_min,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupRequest {
    pub image_id: String,
    /// crop2 dimensions.
    pub frame: (usize, usize),
    pub detections: Vec<WireDetection>,
    /// Upscaled semantic foreground over crop2; absent when the semantic
    /// stage was degraded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<RleMask>,
    pub params: DedupParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupResponse {
    pub detections: Vec<WireDetection>,
    pub model_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub image_id: String,
    /// Chromosome bbox crop; pixels outside the mask are set to white.
    pub patch: Raster,
    /// Mask over the patch.
    pub mask: RleMask,
    /// Patch origin in original coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<(usize, usize)>,
    pub augmented: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub class_probs: Vec<f64>,
    pub rotation_sin: f64,
    pub rotation_cos: f64,
    pub model_version: String,
}

impl ClassifyResponse {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.class_probs.len() != NUM_CLASSES {
            return Err(ProtocolError::InvalidResponse(format!(
                "expected {NUM_CLASSES} probabilities, got {}",
                self.class_probs.len()
            )));
        }
        let sum: f64 = self.class_probs.iter().sum();
        if self.class_probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(ProtocolError::InvalidResponse("probabilities not normalized".into()));
        }
        let norm = self.rotation_sin.powi(2) + self.rotation_cos.powi(2);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(ProtocolError::InvalidResponse("rotation not on the unit circle".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Rotation {
        Rotation {
            sin: self.rotation_sin,
            cos: self.rotation_cos,
        }
    }
}

/// Server side of the four model contracts.
pub trait ModelService: Send + Sync {
    fn service_name(&self) -> &str;
    fn model_version(&self) -> &str;
    fn semseg(&self, req: &SemSegRequest) -> Result<SemSegResponse, ProtocolError>;
    fn instances(&self, req: &InstanceRequest) -> Result<InstanceResponse, ProtocolError>;
    fn dedup(&self, req: &DedupRequest) -> Result<DedupResponse, ProtocolError>;
    fn classify(&self, req: &ClassifyRequest) -> Result<ClassifyResponse, ProtocolError>;
}

impl<M: ModelService + ?Sized> ModelService for std::sync::Arc<M> {
    fn service_name(&self) -> &str {
        (**self).service_name()
    }
    fn model_version(&self) -> &str {
        (**self).model_version()
    }
    fn semseg(&self, req: &SemSegRequest) -> Result<SemSegResponse, ProtocolError> {
        (**self).semseg(req)
    }
    fn instances(&self, req: &InstanceRequest) -> Result<InstanceResponse, ProtocolError> {
        (**self).instances(req)
    }
    fn dedup(&self, req: &DedupRequest) -> Result<DedupResponse, ProtocolError> {
        (**self).dedup(req)
    }
    fn classify(&self, req: &ClassifyRequest) -> Result<ClassifyResponse, ProtocolError> {
        (**self).classify(req)
    }
}

/// Service health payload served at `GET /healthz`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub service: String,
    pub model_version: String,
}
