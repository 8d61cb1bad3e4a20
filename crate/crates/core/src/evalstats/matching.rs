use serde::{Deserialize, Serialize};

use super::{EvalConfig, EvalError};
use crate::imaging::{Rect, RegionMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "pred_id")]
pub enum MatchOutcome {
    Correct(u32),
    MergedWithOther(u32),
    Missed,
}

impl MatchOutcome {
    pub fn correct_pred(&self) -> Option<u32> {
        match self {
            MatchOutcome::Correct(p) => Some(*p),
            _ => None,
        }
    }
}

/// Instance masks on one canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub width: usize,
    pub height: usize,
    pub items: Vec<(u32, RegionMask)>,
}

impl MaskSet {
    pub fn new(width: usize, height: usize, items: Vec<(u32, RegionMask)>) -> Self {
        Self { width, height, items }
    }

    fn check(&self) -> Result<(), EvalError> {
        let canvas = Rect::new(0, 0, self.width, self.height);
        match self
            .items
            .iter()
            .find(|(_, m)| m.bbox().is_some_and(|b| !canvas.contains_rect(&b)))
        {
            Some((id, _)) => Err(EvalError::DimensionMismatch(format!(
                "instance {id} extends beyond the {}x{} canvas",
                self.width, self.height
            ))),
            None => Ok(()),
        }
    }
}

/// Assigns one outcome per ground-truth instance, in `gts` order.
///
/// Correct pairs are chosen greedily by descending IoU among pairs reaching
/// `iou_thresh`; a prediction may justify only one Correct, and only if it
/// covers no other ground-truth instance beyond `cross_cover` of that
/// instance's area. Unassigned instances are MergedWithOther when some
/// prediction covers at least `cross_cover` of them and of another instance,
/// Missed otherwise.
pub fn match_instances(preds: &MaskSet, gts: &MaskSet, cfg: &EvalConfig) -> Result<Vec<MatchOutcome>, EvalError> {
    if (preds.width, preds.height) != (gts.width, gts.height) {
        return Err(EvalError::DimensionMismatch(format!(
            "predictions on {}x{}, ground truth on {}x{}",
            preds.width, preds.height, gts.width, gts.height
        )));
    }
    preds.check()?;
    gts.check()?;

    let gt_area: Vec<usize> = gts.items.iter().map(|(_, m)| m.area()).collect();
    let pred_area: Vec<usize> = preds.items.iter().map(|(_, m)| m.area()).collect();
    // inter[p][g]
    let inter: Vec<Vec<usize>> = preds
        .items
        .iter()
        .map(|(_, pm)| gts.items.iter().map(|(_, gm)| pm.intersection_count(gm)).collect())
        .collect();
    let cover = |p: usize, g: usize| {
        if gt_area[g] == 0 {
            0.0
        } else {
            inter[p][g] as f64 / gt_area[g] as f64
        }
    };
    let iou = |p: usize, g: usize| {
        let union = pred_area[p] + gt_area[g] - inter[p][g];
        if union == 0 {
            0.0
        } else {
            inter[p][g] as f64 / union as f64
        }
    };
    let clean_for = |p: usize, g: usize| (0..gts.items.len()).all(|o| o == g || cover(p, o) <= cfg.cross_cover);

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for p in 0..preds.items.len() {
        for g in 0..gts.items.len() {
            if inter[p][g] > 0 {
                let v = iou(p, g);
                if v >= cfg.iou_thresh {
                    pairs.push((v, g, p));
                }
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut outcomes = vec![None; gts.items.len()];
    let mut used = vec![false; preds.items.len()];
    for (_, g, p) in pairs {
        if outcomes[g].is_none() && !used[p] && clean_for(p, g) {
            outcomes[g] = Some(MatchOutcome::Correct(preds.items[p].0));
            used[p] = true;
        }
    }
    Ok(outcomes
        .into_iter()
        .enumerate()
        .map(|(g, o)| {
            o.unwrap_or_else(|| {
                let merged = (0..preds.items.len())
                    .filter(|&p| {
                        cover(p, g) >= cfg.cross_cover
                            && (0..gts.items.len()).any(|o| o != g && cover(p, o) >= cfg.cross_cover)
                    })
                    .max_by(|&x, &y| cover(x, g).total_cmp(&cover(y, g)).then(y.cmp(&x)));
                match merged {
                    Some(p) => MatchOutcome::MergedWithOther(preds.items[p].0),
                    None => MatchOutcome::Missed,
                }
            })
        })
        .collect())
}
