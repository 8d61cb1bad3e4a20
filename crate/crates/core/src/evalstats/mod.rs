//! Evaluation against ground truth: instance matching, per-instance
//! records, accuracy tables and Fisher exact tests between systems.

mod fisher;
mod matching;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{axis_angle_difference, Annotation, ClassLabel};
use crate::synthgen::GroundTruth;

pub use fisher::{fisher_exact_2x2, FisherError};
pub use matching::{match_instances, MaskSet, MatchOutcome};
pub use report::{
    build_report, format_p_value, format_percent, format_percent_compact, render_text, AccuracyRow,
    ClassRow, Comparison, EvalReport, FacetRow, SegmentationRow,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    /// Fraction of a ground-truth instance a prediction must cover to count
    /// it as part of a merge.
    pub cross_cover: f64,
    pub rot_tol_deg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            cross_cover: 0.25,
            rot_tol_deg: 15.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.iou_thresh) || !unit(self.cross_cover) {
            return Err(EvalError::InvalidConfig("iou_thresh and cross_cover must lie in [0, 1]".into()));
        }
        if !(0.0..=90.0).contains(&self.rot_tol_deg) {
            return Err(EvalError::InvalidConfig("rot_tol_deg must lie in [0, 90]".into()));
        }
        Ok(())
    }
}

/// Everything known about one ground-truth instance after evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub spread_id: String,
    pub gt_id: u32,
    pub gt_class: ClassLabel,
    pub outcome: MatchOutcome,
    pub pred_class: Option<ClassLabel>,
    pub class_correct: bool,
    pub rotation_correct: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

/// Per-instance records of one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRecords {
    pub system: String,
    pub records: Vec<InstanceRecord>,
}

/// Whether a predicted axis angle is within `tol` of the truth, modulo 180°.
pub fn rotation_matches(pred_deg: f64, gt_deg: f64, tol: f64) -> bool {
    axis_angle_difference(pred_deg, gt_deg) <= tol + 1e-9
}

/// Classification and rotation verdicts for one ground-truth instance. Only
/// Correct segmentations carry a prediction to compare; every other outcome
/// counts as incorrect on both axes.
pub fn accuracy_counts(
    outcome: MatchOutcome,
    pred: Option<(ClassLabel, f64)>,
    gt: (ClassLabel, f64),
    rot_tol_deg: f64,
) -> (bool, bool) {
    match (outcome, pred) {
        (MatchOutcome::Correct(_), Some((class, angle))) => {
            (class == gt.0, rotation_matches(angle, gt.1, rot_tol_deg))
        }
        _ => (false, false),
    }
}

/// Rasterizes annotations, matches them against the ground truth and emits
/// one record per ground-truth instance.
pub fn evaluate_spread(
    gt: &GroundTruth,
    annotations: &[Annotation],
    cfg: &EvalConfig,
    tags: &BTreeMap<String, String>,
) -> Result<Vec<InstanceRecord>, EvalError> {
    let pred_masks: Vec<(u32, crate::imaging::RegionMask)> = annotations
        .iter()
        .filter_map(|a| a.polygon.rasterize().map(|m| (a.id, m)))
        .collect();
    let preds = MaskSet::new(gt.width, gt.height, pred_masks);
    let gts = MaskSet::new(
        gt.width,
        gt.height,
        gt.instances.iter().map(|i| (i.id, i.mask.clone())).collect(),
    );
    let outcomes = match_instances(&preds, &gts, cfg)?;
    let by_id: BTreeMap<u32, &Annotation> = annotations.iter().map(|a| (a.id, a)).collect();
    Ok(gt
        .instances
        .iter()
        .zip(outcomes)
        .map(|(inst, outcome)| {
            let pred = outcome
                .correct_pred()
                .and_then(|p| by_id.get(&p))
                .map(|a| (a.class_label, a.rotation.degrees()));
            let (class_correct, rotation_correct) =
                accuracy_counts(outcome, pred, (inst.class_label, inst.angle_degrees), cfg.rot_tol_deg);
            InstanceRecord {
                spread_id: gt.image_id.clone(),
                gt_id: inst.id,
                gt_class: inst.class_label,
                outcome,
                pred_class: pred.map(|p| p.0),
                class_correct,
                rotation_correct,
                tags: tags.clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_tolerance_boundary() {
        assert!(rotation_matches(170.0, 5.0, 15.0));
        assert!(!rotation_matches(169.0, 5.0, 15.0));
        assert!(rotation_matches(171.0, 5.0, 15.0));
        assert!(rotation_matches(-85.0, 89.0, 15.0));
    }

    #[test]
    fn one_flip_among_46() {
        let verdicts: Vec<(bool, bool)> = (0..46)
            .map(|i| {
                let gt = (ClassLabel::Autosome(1), 10.0);
                let pred = if i == 0 { (ClassLabel::Autosome(2), 10.0) } else { (ClassLabel::Autosome(1), 10.0) };
                accuracy_counts(MatchOutcome::Correct(i), Some(pred), gt, 15.0)
            })
            .collect();
        assert_eq!(verdicts.iter().filter(|v| v.0).count(), 45);
        assert_eq!(verdicts.iter().filter(|v| v.1).count(), 46);
        assert_eq!(accuracy_counts(MatchOutcome::Missed, None, (ClassLabel::X, 0.0), 15.0), (false, false));
    }
}
