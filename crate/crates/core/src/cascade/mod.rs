//! Region-of-interest cascade: prefilter crop, semantic-stage input
//! preparation, semantic bounding crop, two-angle merge, duplicate
//! resolution and back-transformation into original coordinates.
//!
//! Frames used throughout:
//! * original: the ingested image;
//! * semseg canvas: crop1 scaled by `semseg_scale` and padded at the
//!   bottom/right to `semseg_canvas × semseg_canvas`;
//! * crop2-local: original coordinates shifted by the crop2 origin.

mod labels;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{
    binarize, connected_components, otsu_threshold, pad_edge_replicate, resize_by_scale,
    resize_constrained, scaled_dim, warp_region_mask, AffineTransform, BinaryMask, Connectivity,
    ImagingError, Polarity, Polygon, Raster, Rect, RegionMask,
};

pub use labels::{
    argmax, axis_angle_difference, uniform_probs, Annotation, ClassLabel, InvalidClassLabel,
    Rotation, NUM_CLASSES,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CascadeError {
    #[error("no foreground component survived the prefilter")]
    NoForeground,
    #[error("semantic mask has no foreground inside the unpadded region")]
    EmptySemanticMask,
    #[error("invalid cascade parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeParams {
    pub thumb_max_dim: usize,
    /// Minimum component area on the thumbnail.
    pub min_component_area: usize,
    pub crop1_margin: usize,
    pub crop2_margin: usize,
    pub semseg_min_dim: usize,
    pub semseg_max_dim: usize,
    pub semseg_canvas: usize,
    pub merge_iou: f64,
    pub dedup_center_dist: f64,
    pub semantic_agreement_min: f64,
    /// A classifier output whose top probability falls below this value is
    /// treated as Unknown, which triggers the augmented second pass.
    pub unknown_min_prob: f64,
    /// Components smaller than this (original pixels) are ignored by the
    /// classical instance stub.
    pub min_instance_area: usize,
}

impl Default for CascadeParams {
    fn default() -> Self {
        Self {
            thumb_max_dim: 256,
            min_component_area: 8,
            crop1_margin: 16,
            crop2_margin: 12,
            semseg_min_dim: 512,
            semseg_max_dim: 992,
            semseg_canvas: 992,
            merge_iou: 0.7,
            dedup_center_dist: 20.0,
            semantic_agreement_min: 0.3,
            unknown_min_prob: 0.2,
            min_instance_area: 64,
        }
    }
}

impl CascadeParams {
    pub fn validate(&self) -> Result<(), CascadeError> {
        let bad = |m: &str| Err(CascadeError::InvalidParams(m.to_string()));
        if self.thumb_max_dim == 0 {
            return bad("thumb_max_dim must be positive");
        }
        if self.semseg_min_dim == 0 || self.semseg_min_dim > self.semseg_max_dim {
            return bad("need 0 < semseg_min_dim <= semseg_max_dim");
        }
        if self.semseg_canvas < self.semseg_max_dim {
            return bad("semseg_canvas must hold semseg_max_dim");
        }
        if !(self.merge_iou > 0.0 && self.merge_iou < 1.0) {
            return bad("merge_iou must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.semantic_agreement_min) {
            return bad("semantic_agreement_min must lie in [0, 1]");
        }
        if !(self.dedup_center_dist >= 0.0) {
            return bad("dedup_center_dist must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.unknown_min_prob) {
            return bad("unknown_min_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Coordinate bookkeeping from the original image down to crop2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiChain {
    pub image_width: usize,
    pub image_height: usize,
    pub crop1: Rect,
    pub semseg_scale: f64,
    pub semseg_pad_offset: (usize, usize),
    pub crop2: Rect,
}

impl RoiChain {
    pub fn is_consistent(&self) -> bool {
        let bounds = Rect::new(0, 0, self.image_width, self.image_height);
        self.semseg_scale > 0.0
            && self.crop1.area() > 0
            && self.crop2.area() > 0
            && bounds.contains_rect(&self.crop1)
            && self.crop1.contains_rect(&self.crop2)
    }

    pub fn crop2_to_original(&self, x: f64, y: f64) -> (f64, f64) {
        (x + self.crop2.x0 as f64, y + self.crop2.y0 as f64)
    }

    pub fn original_to_crop2(&self, x: f64, y: f64) -> (f64, f64) {
        (x - self.crop2.x0 as f64, y - self.crop2.y0 as f64)
    }

    pub fn original_to_semseg(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.semseg_scale;
        (
            (x - self.crop1.x0 as f64) * s + self.semseg_pad_offset.0 as f64,
            (y - self.crop1.y0 as f64) * s + self.semseg_pad_offset.1 as f64,
        )
    }

    pub fn semseg_to_original(&self, u: f64, v: f64) -> (f64, f64) {
        let s = self.semseg_scale;
        (
            (u - self.semseg_pad_offset.0 as f64) / s + self.crop1.x0 as f64,
            (v - self.semseg_pad_offset.1 as f64) / s + self.crop1.y0 as f64,
        )
    }

    /// Unpadded part of the semseg canvas.
    pub fn semseg_content(&self) -> Rect {
        semseg_content_rect(&self.crop1, self.semseg_scale)
    }

    /// The crop1-to-canvas transform as an affine map.
    pub fn semseg_transform(&self) -> AffineTransform {
        let s = self.semseg_scale;
        AffineTransform {
            m: [
                [s, 0.0, self.semseg_pad_offset.0 as f64 - s * self.crop1.x0 as f64],
                [0.0, s, self.semseg_pad_offset.1 as f64 - s * self.crop1.y0 as f64],
            ],
        }
    }
}

fn semseg_content_rect(crop1: &Rect, s: f64) -> Rect {
    Rect::new(0, 0, scaled_dim(crop1.w, s), scaled_dim(crop1.h, s))
}

/// Three-class semantic output on the semseg canvas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMask {
    width: usize,
    height: usize,
    classes: Vec<u8>,
}

impl SemanticMask {
    pub const BACKGROUND: u8 = 0;
    pub const CHROMOSOME: u8 = 1;
    pub const OVERLAP: u8 = 2;

    pub fn new(width: usize, height: usize, classes: Vec<u8>) -> Result<Self, ImagingError> {
        if classes.len() != width * height || classes.iter().any(|&c| c > Self::OVERLAP) {
            return Err(ImagingError::InvalidDimensions {
                width,
                height,
                len: classes.len(),
            });
        }
        Ok(Self {
            width,
            height,
            classes,
        })
    }

    pub fn background(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            classes: vec![Self::BACKGROUND; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    /// Pixels of class chromosome or overlap.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| self.get(x, y) != Self::BACKGROUND)
    }
}

/// One instance detection; the mask lives in crop2-local coordinates (or the
/// rotated canvas for the 45° pass before merging).
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub mask: RegionMask,
    pub score: f64,
}

impl Detection {
    /// `None` when the mask is empty.
    pub fn new(mask: RegionMask, score: f64) -> Option<Self> {
        Some(Self {
            mask: mask.trimmed()?,
            score,
        })
    }

    pub fn bbox(&self) -> Rect {
        self.mask.window()
    }
}

/// Stage 1: thumbnail, Otsu, component filter, union of surviving boxes
/// mapped back to original resolution plus `crop1_margin`.
pub fn prefilter_crop(original: &Raster, params: &CascadeParams) -> Result<Rect, CascadeError> {
    let (w, h) = original.dims();
    let t = params.thumb_max_dim as f64 / w.max(h) as f64;
    let thumb = resize_by_scale(original, t);
    let level = otsu_threshold(&thumb).map_err(|_| CascadeError::NoForeground)?;
    let fg = binarize(&thumb, level, Polarity::DarkForeground);
    let labels = connected_components(&fg, Connectivity::Eight);
    let union = labels
        .components
        .iter()
        .filter(|c| c.area >= params.min_component_area)
        .map(|c| c.bbox)
        .reduce(|a, b| a.union(&b))
        .ok_or(CascadeError::NoForeground)?;
    let bounds = original.bounds();
    let x0 = ((union.x0 as f64 / t).floor() as usize).min(w - 1);
    let y0 = ((union.y0 as f64 / t).floor() as usize).min(h - 1);
    let x1 = ((union.x1() as f64 / t).ceil() as usize).clamp(x0 + 1, w);
    let y1 = ((union.y1() as f64 / t).ceil() as usize).clamp(y0 + 1, h);
    Ok(Rect::new(x0, y0, x1 - x0, y1 - y0).expand_within(params.crop1_margin, &bounds))
}

/// Stage 2: crop, constrained resize, edge-replicated padding to the canvas.
pub fn prepare_semseg_input(
    original: &Raster,
    crop1: &Rect,
    params: &CascadeParams,
) -> Result<(Raster, f64), CascadeError> {
    let cropped = original.crop(crop1)?;
    let (resized, s) = resize_constrained(&cropped, params.semseg_min_dim, params.semseg_max_dim);
    let padded = pad_edge_replicate(&resized, params.semseg_canvas, params.semseg_canvas)?;
    Ok((padded, s))
}

/// Stage 4: bounding box of the semantic foreground mapped to original
/// coordinates, expanded by `crop2_margin` and clamped to crop1.
pub fn mask_bbox_crop(
    sem: &SemanticMask,
    crop1: &Rect,
    semseg_scale: f64,
    params: &CascadeParams,
) -> Result<Rect, CascadeError> {
    let content = semseg_content_rect(crop1, semseg_scale);
    let fg_box = sem
        .foreground()
        .tight_bbox()
        .and_then(|b| b.intersect(&content))
        .ok_or(CascadeError::EmptySemanticMask)?;
    let s = semseg_scale;
    let x0 = ((fg_box.x0 as f64 / s).floor() as usize).min(crop1.w - 1);
    let y0 = ((fg_box.y0 as f64 / s).floor() as usize).min(crop1.h - 1);
    let x1 = ((fg_box.x1() as f64 / s).ceil() as usize).clamp(x0 + 1, crop1.w);
    let y1 = ((fg_box.y1() as f64 / s).ceil() as usize).clamp(y0 + 1, crop1.h);
    let local = Rect::new(x0, y0, x1 - x0, y1 - y0).translate(crop1.x0, crop1.y0);
    Ok(local.expand_within(params.crop2_margin, crop1))
}

/// Nearest-neighbour upscale of the semantic foreground onto crop2.
/// Canvas positions outside the unpadded content count as background.
pub fn upscale_semantic(sem: &SemanticMask, chain: &RoiChain) -> BinaryMask {
    let content = chain.semseg_content();
    let s = chain.semseg_scale;
    let (ox, oy) = (chain.crop2.x0 - chain.crop1.x0, chain.crop2.y0 - chain.crop1.y0);
    let cols: Vec<Option<usize>> = (0..chain.crop2.w)
        .map(|x| {
            let u = (((ox + x) as f64 + 0.5) * s).floor() as usize + chain.semseg_pad_offset.0;
            (u < content.w.min(sem.width())).then_some(u)
        })
        .collect();
    let rows: Vec<Option<usize>> = (0..chain.crop2.h)
        .map(|y| {
            let v = (((oy + y) as f64 + 0.5) * s).floor() as usize + chain.semseg_pad_offset.1;
            (v < content.h.min(sem.height())).then_some(v)
        })
        .collect();
    BinaryMask::from_fn(chain.crop2.w, chain.crop2.h, |x, y| match (cols[x], rows[y]) {
        (Some(u), Some(v)) => sem.get(u, v) != SemanticMask::BACKGROUND,
        _ => false,
    })
}

/// Stage 5 merge: maps the 45° detections back through `rot45` (crop2 →
/// rotated canvas) and runs greedy mask NMS over the pooled set.
pub fn two_angle_merge(
    dets0: Vec<Detection>,
    dets45: Vec<Detection>,
    rot45: &AffineTransform,
    frame: (usize, usize),
    params: &CascadeParams,
) -> Vec<Detection> {
    let inverse = rot45.inverse().expect("rotation transforms are invertible");
    let mapped = dets45.into_iter().filter_map(|d| {
        let mask = warp_region_mask(&d.mask, &inverse, frame.0, frame.1)?;
        Detection::new(mask, d.score)
    });
    let pooled: Vec<Detection> = dets0.into_iter().chain(mapped).collect();
    non_max_suppression(pooled, params.merge_iou)
}

/// Greedy NMS by descending score (stable for equal scores); a detection is
/// suppressed when its IoU with any kept one reaches `iou_thresh`.
pub fn non_max_suppression(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| k.mask.iou(&d.mask) < iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Stage 6: merges near-duplicate detections, then (when a semantic mask is
/// available) drops detections that mostly disagree with it and clips the
/// rest to the semantic foreground.
pub fn resolve_duplicates(
    dets: Vec<Detection>,
    sem_upscaled: Option<&BinaryMask>,
    params: &CascadeParams,
) -> Vec<Detection> {
    let mut dets = dets;
    'outer: loop {
        for i in 0..dets.len() {
            for j in i + 1..dets.len() {
                if is_duplicate(&dets[i], &dets[j], params) {
                    let b = dets.remove(j);
                    let a = &mut dets[i];
                    a.mask = a.mask.union(&b.mask);
                    a.score = a.score.max(b.score);
                    continue 'outer;
                }
            }
        }
        break;
    }
    let Some(sem) = sem_upscaled else {
        return dets;
    };
    let inside = |x: usize, y: usize| x < sem.width() && y < sem.height() && sem.get(x, y);
    dets.into_iter()
        .filter_map(|d| {
            let area = d.mask.area();
            let agree = d.mask.pixels().filter(|&(x, y)| inside(x, y)).count();
            if area == 0 || (agree as f64) / (area as f64) < params.semantic_agreement_min {
                return None;
            }
            Detection::new(d.mask.retain(inside), d.score)
        })
        .collect()
}

fn is_duplicate(a: &Detection, b: &Detection, params: &CascadeParams) -> bool {
    let (Some(ca), Some(cb)) = (a.mask.centroid(), b.mask.centroid()) else {
        return false;
    };
    let dist = (ca.0 - cb.0).hypot(ca.1 - cb.1);
    dist <= params.dedup_center_dist && a.mask.iou(&b.mask) >= params.merge_iou
}

/// Stage 8: traces each crop2-local mask and translates it into original
/// coordinates. Masks that trace to nothing are skipped.
pub fn back_transform(dets: &[Detection], chain: &RoiChain) -> Vec<Polygon> {
    dets.iter()
        .filter_map(|d| crate::imaging::polygon::trace_boundary(&d.mask))
        .map(|p| p.translated(chain.crop2.x0 as f64, chain.crop2.y0 as f64))
        .collect()
}
