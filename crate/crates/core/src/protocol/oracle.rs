//! Test double answering every model contract from registered ground truth.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::{
    decode_detections, encode_detections, AngleTag, ClassRuns, ClassifyRequest, ClassifyResponse,
    DedupRequest, DedupResponse, InstanceRequest, InstanceResponse, ModelService, ProtocolError,
    SemSegRequest, SemSegResponse,
};
use crate::cascade::{ClassLabel, Detection, SemanticMask, NUM_CLASSES};
use crate::imaging::{constrained_scale, rotation_frame, scaled_dim, warp_region_mask, Rect, RegionMask};
use crate::synthgen::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleNoise {
    /// Target IoU loss per mask: masks are eroded or dilated while their IoU
    /// with the truth stays at or above `1 - iou_degrade`.
    pub iou_degrade: f64,
    /// Fraction of all registered instances whose label is flipped.
    pub misclass_rate: f64,
    pub seed: u64,
}

/// Read-mostly ground-truth store keyed by image id.
#[derive(Debug, Default)]
pub struct GroundTruthRegistry {
    inner: RwLock<BTreeMap<String, Arc<GroundTruth>>>,
}

impl GroundTruthRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, gt: GroundTruth) {
        self.inner
            .write()
            .expect("registry lock poisoned")
            .insert(gt.image_id.clone(), Arc::new(gt));
    }

    pub fn get(&self, image_id: &str) -> Result<Arc<GroundTruth>, ProtocolError> {
        self.inner
            .read()
            .expect("registry lock poisoned")
            .get(image_id)
            .cloned()
            .ok_or_else(|| ProtocolError::UnknownImageId(image_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("registry lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn instance_keys(&self) -> Vec<(String, u32)> {
        let map = self.inner.read().expect("registry lock poisoned");
        map.iter()
            .flat_map(|(id, gt)| gt.instances.iter().map(move |i| (id.clone(), i.id)))
            .collect()
    }
}

/// 64-bit FNV-1a followed by a splitmix finalizer; stable across platforms.
fn stable_hash(seed: u64, text: &str, n: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in text.bytes().chain(n.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone)]
pub struct OracleModels {
    pub registry: Arc<GroundTruthRegistry>,
    pub noise: OracleNoise,
}

impl OracleModels {
    pub const VERSION: &'static str = "ground-truth-oracle-1";

    pub fn new(registry: Arc<GroundTruthRegistry>, noise: OracleNoise) -> Self {
        Self { registry, noise }
    }

    /// Instances whose labels are flipped: the first `round(rate * N)` of
    /// all registered instances ordered by a seeded hash.
    pub fn flipped_instances(&self) -> Vec<(String, u32)> {
        let mut keys = self.registry.instance_keys();
        let count = (self.noise.misclass_rate * keys.len() as f64).round() as usize;
        if count == 0 {
            return Vec::new();
        }
        keys.sort_by_cached_key(|(id, n)| (stable_hash(self.noise.seed, id, *n as u64), id.clone(), *n));
        keys.truncate(count);
        keys
    }

    /// Reported label for a ground-truth instance after noise.
    pub fn reported_label(&self, image_id: &str, instance_id: u32, truth: ClassLabel) -> ClassLabel {
        let flipped = self
            .flipped_instances()
            .iter()
            .any(|(id, n)| id == image_id && *n == instance_id);
        if !flipped {
            return truth;
        }
        let idx = truth.index().unwrap_or(0);
        let shift = 1 + (stable_hash(self.noise.seed ^ 0xf11b, image_id, instance_id as u64) % 23) as usize;
        ClassLabel::from_index((idx + shift) % NUM_CLASSES).expect("in range")
    }

    fn degrade(&self, image_id: &str, instance_id: u32, mask: RegionMask) -> RegionMask {
        if self.noise.iou_degrade <= 0.0 {
            return mask;
        }
        let floor = 1.0 - self.noise.iou_degrade;
        let grow = stable_hash(self.noise.seed ^ 0xd11a7e, image_id, instance_id as u64) & 1 == 1;
        let mut current = mask.clone();
        loop {
            let next = if grow { dilate(&current) } else { erode(&current) };
            if next.is_empty() || next.iou(&mask) < floor {
                return current;
            }
            current = next;
        }
    }
}

fn erode(m: &RegionMask) -> RegionMask {
    let keep = |x: usize, y: usize| {
        x > 0 && y > 0 && m.contains(x - 1, y) && m.contains(x + 1, y) && m.contains(x, y - 1) && m.contains(x, y + 1)
    };
    let r = m.retain(keep);
    r.trimmed().unwrap_or(r)
}

fn dilate(m: &RegionMask) -> RegionMask {
    let w = m.window();
    let x0 = w.x0.saturating_sub(1);
    let y0 = w.y0.saturating_sub(1);
    let window = Rect::new(x0, y0, w.x1() + 1 - x0, w.y1() + 1 - y0);
    RegionMask::from_fn(window, |x, y| {
        m.contains(x, y)
            || m.contains(x + 1, y)
            || m.contains(x, y + 1)
            || (x > 0 && m.contains(x - 1, y))
            || (y > 0 && m.contains(x, y - 1))
    })
}

impl ModelService for OracleModels {
    fn service_name(&self) -> &str {
        "oracle"
    }

    fn model_version(&self) -> &str {
        Self::VERSION
    }

    fn semseg(&self, req: &SemSegRequest) -> Result<SemSegResponse, ProtocolError> {
        let gt = self.registry.get(&req.image_id)?;
        let (crop1, s) = match req.roi {
            Some(roi) => (roi.crop1, roi.scale),
            None => (Rect::new(0, 0, gt.width, gt.height), constrained_scale(gt.width, gt.height, 512, 992)),
        };
        let mut counts = vec![0u8; crop1.area()];
        for inst in &gt.instances {
            for (x, y) in inst.mask.pixels() {
                if crop1.contains(x, y) {
                    let c = &mut counts[(y - crop1.y0) * crop1.w + (x - crop1.x0)];
                    *c = c.saturating_add(1);
                }
            }
        }
        let (w, h) = req.image.dims();
        let (cw, ch) = (scaled_dim(crop1.w, s).min(w), scaled_dim(crop1.h, s).min(h));
        let mut classes = vec![SemanticMask::BACKGROUND; w * h];
        for v in 0..ch {
            let oy = (((v as f64 + 0.5) / s).floor() as usize).min(crop1.h - 1);
            for u in 0..cw {
                let ox = (((u as f64 + 0.5) / s).floor() as usize).min(crop1.w - 1);
                classes[v * w + u] = counts[oy * crop1.w + ox].min(SemanticMask::OVERLAP);
            }
        }
        let mask = SemanticMask::new(w, h, classes).expect("dims match");
        Ok(SemSegResponse {
            mask: ClassRuns::encode(&mask),
            model_version: Self::VERSION.into(),
            warning: None,
        })
    }

    fn instances(&self, req: &InstanceRequest) -> Result<InstanceResponse, ProtocolError> {
        let gt = self.registry.get(&req.image_id)?;
        let crop2 = req.roi.unwrap_or(Rect::new(0, 0, gt.width, gt.height));
        let rotation = match req.angle_tag {
            AngleTag::Zero => None,
            AngleTag::FortyFive => Some(rotation_frame(crop2.w, crop2.h, 45.0)),
        };
        let mut dets = Vec::new();
        for inst in &gt.instances {
            let Some(local) = inst.mask.reframe(crop2.x0, crop2.y0, crop2.w, crop2.h) else {
                continue;
            };
            let local = self.degrade(&req.image_id, inst.id, local);
            let mask = match &rotation {
                None => Some(local),
                Some((cw, ch, t)) => warp_region_mask(&local, t, *cw, *ch),
            };
            if let Some(d) = mask.and_then(|m| Detection::new(m, 1.0)) {
                dets.push(d);
            }
        }
        Ok(InstanceResponse {
            detections: encode_detections(&dets),
            model_version: Self::VERSION.into(),
        })
    }

    fn dedup(&self, req: &DedupRequest) -> Result<DedupResponse, ProtocolError> {
        self.registry.get(&req.image_id)?;
        // Truth-derived detections carry no duplicates; pass them through.
        let dets = decode_detections(&req.detections)?;
        Ok(DedupResponse {
            detections: encode_detections(&dets),
            model_version: Self::VERSION.into(),
        })
    }

    fn classify(&self, req: &ClassifyRequest) -> Result<ClassifyResponse, ProtocolError> {
        let gt = self.registry.get(&req.image_id)?;
        let origin = req
            .origin
            .ok_or_else(|| ProtocolError::InvalidRequest("oracle classification needs the patch origin".into()))?;
        let mask = RegionMask::new(origin, req.mask.decode()?);
        if mask.is_empty() {
            return Err(ProtocolError::EmptyMask);
        }
        let best = gt
            .instances
            .iter()
            .map(|inst| (inst.mask.intersection_count(&mask), inst))
            .filter(|(n, _)| *n > 0)
            .max_by_key(|(n, inst)| (*n, std::cmp::Reverse(inst.id)))
            .map(|(_, inst)| inst)
            .ok_or_else(|| ProtocolError::InvalidRequest("mask overlaps no ground-truth instance".into()))?;
        let label = self.reported_label(&req.image_id, best.id, best.class_label);
        let mut probs = vec![0.0; NUM_CLASSES];
        probs[label.index().expect("rendered labels have slots")] = 1.0;
        let (sin, cos) = best.angle_degrees.to_radians().sin_cos();
        Ok(ClassifyResponse {
            class_probs: probs,
            rotation_sin: sin,
            rotation_cos: cos,
            model_version: Self::VERSION.into(),
        })
    }
}
