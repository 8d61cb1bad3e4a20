//! Classical stand-ins for the trained models: Otsu semantic mask,
//! connected-component instances, resolve_duplicates as the dedup service,
//! and a moments/area classifier.

use super::{
    decode_detections, encode_detections, ClassRuns, ClassifyRequest, ClassifyResponse,
    DedupRequest, DedupResponse, InstanceRequest, InstanceResponse, ModelService, ProtocolError,
    SemSegRequest, SemSegResponse,
};
use crate::cascade::{resolve_duplicates, CascadeParams, ClassLabel, Detection, SemanticMask};
use crate::imaging::{
    binarize, connected_components, otsu_threshold, BinaryMask, Connectivity, ImagingError,
    Polarity, Raster, RegionMask,
};
use crate::synthgen::{expected_area, fold_axis_angle};

/// Softmax temperature over area differences, in square pixels.
const AREA_TEMPERATURE: f64 = 80.0;

/// Dark pixels become class 1; class 2 is never produced.
pub fn stub_semseg(image: &Raster) -> Result<SemanticMask, ImagingError> {
    let t = otsu_threshold(image)?;
    let fg = binarize(image, t, Polarity::DarkForeground);
    let classes = fg.bits().iter().map(|&b| b as u8).collect();
    Ok(SemanticMask::new(image.width(), image.height(), classes).expect("same dims"))
}

/// One detection per dark 8-connected component of at least `min_area`
/// pixels, scored `0.5 + 0.5 * area / max_area`.
pub fn stub_instances(image: &Raster, min_area: usize) -> Vec<Detection> {
    let Ok(t) = otsu_threshold(image) else {
        return Vec::new();
    };
    let fg = binarize(image, t, Polarity::DarkForeground);
    let labels = connected_components(&fg, Connectivity::Eight);
    let kept: Vec<_> = labels
        .components
        .iter()
        .filter(|c| c.area >= min_area.max(1))
        .collect();
    let max_area = kept.iter().map(|c| c.area).max().unwrap_or(1) as f64;
    kept.iter()
        .filter_map(|c| {
            let mask = labels.region(c.id)?;
            Detection::new(mask, 0.5 + 0.5 * c.area as f64 / max_area)
        })
        .collect()
}

/// Major-axis angle of the mask in (-90, 90]: 0 is vertical, positive
/// leans the top of the axis to the right.
pub fn principal_axis_degrees(mask: &RegionMask) -> Option<f64> {
    let (cx, cy) = mask.centroid()?;
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for (x, y) in mask.pixels() {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        m20 += dx * dx;
        m02 += dy * dy;
        m11 += dx * dy;
    }
    // Orientation of the major axis measured from +x towards +y.
    let phi = 0.5 * (2.0 * m11).atan2(m20 - m02);
    Some(fold_axis_angle(phi.to_degrees() + 90.0))
}

fn jitter(mask: &BinaryMask) -> BinaryMask {
    const SEED: u64 = 0x5eed_0ff5_e7;
    let dropped = BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let h = (x as u64)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
            ^ SEED;
        mask.get(x, y) && (h >> 7) % 11 != 0
    });
    if dropped.is_empty() {
        mask.clone()
    } else {
        dropped
    }
}

/// Rotation from mask moments, class probabilities from a softmax over the
/// negated distance between the mask area and each class's expected area.
pub fn stub_classify(patch: &Raster, mask: &BinaryMask, augmented: bool) -> Result<ClassifyResponse, ProtocolError> {
    if (patch.width(), patch.height()) != (mask.width(), mask.height()) {
        return Err(ProtocolError::InvalidRequest("patch and mask dimensions differ".into()));
    }
    if mask.is_empty() {
        return Err(ProtocolError::EmptyMask);
    }
    let mask = if augmented { jitter(mask) } else { mask.clone() };
    let region = RegionMask::new((0, 0), mask);
    let angle = principal_axis_degrees(&region).ok_or(ProtocolError::EmptyMask)?;
    let area = region.area() as f64;
    let logits: Vec<f64> = ClassLabel::all()
        .map(|c| -(area - expected_area(c)).abs() / AREA_TEMPERATURE)
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    let (sin, cos) = angle.to_radians().sin_cos();
    Ok(ClassifyResponse {
        class_probs: exps.iter().map(|e| e / total).collect(),
        rotation_sin: sin,
        rotation_cos: cos,
        model_version: StubModels::VERSION.into(),
    })
}

/// All four contracts backed by the classical stubs.
#[derive(Debug, Clone, Default)]
pub struct StubModels {
    pub params: CascadeParams,
}

impl StubModels {
    pub const VERSION: &'static str = "classical-stub-1";

    pub fn new(params: CascadeParams) -> Self {
        Self { params }
    }
}

impl ModelService for StubModels {
    fn service_name(&self) -> &str {
        "stub"
    }

    fn model_version(&self) -> &str {
        Self::VERSION
    }

    fn semseg(&self, req: &SemSegRequest) -> Result<SemSegResponse, ProtocolError> {
        let (mask, warning) = match stub_semseg(&req.image) {
            Ok(m) => (m, None),
            Err(e) => (
                SemanticMask::background(req.image.width(), req.image.height()),
                Some(e.to_string()),
            ),
        };
        Ok(SemSegResponse {
            mask: ClassRuns::encode(&mask),
            model_version: Self::VERSION.into(),
            warning,
        })
    }

    fn instances(&self, req: &InstanceRequest) -> Result<InstanceResponse, ProtocolError> {
        let min_area = req.min_area.unwrap_or(self.params.min_instance_area);
        Ok(InstanceResponse {
            detections: encode_detections(&stub_instances(&req.image, min_area)),
            model_version: Self::VERSION.into(),
        })
    }

    fn dedup(&self, req: &DedupRequest) -> Result<DedupResponse, ProtocolError> {
        let dets = decode_detections(&req.detections)?;
        let semantic = req.semantic.as_ref().map(|r| r.decode()).transpose()?;
        if let Some(s) = &semantic {
            if (s.width(), s.height()) != req.frame {
                return Err(ProtocolError::InvalidRequest("semantic mask does not match frame".into()));
            }
        }
        let params = req.params.apply_to(&self.params);
        let out = resolve_duplicates(dets, semantic.as_ref(), &params);
        Ok(DedupResponse {
            detections: encode_detections(&out),
            model_version: Self::VERSION.into(),
        })
    }

    fn classify(&self, req: &ClassifyRequest) -> Result<ClassifyResponse, ProtocolError> {
        stub_classify(&req.patch, &req.mask.decode()?, req.augmented)
    }
}
