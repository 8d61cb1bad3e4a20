use kayra_core::cascade::{uniform_probs, Annotation, ClassLabel, Rotation, NUM_CLASSES};
use kayra_core::imaging::polygon::trace_boundary;
use kayra_core::imaging::{connected_components, Connectivity, Polygon, RegionMask};
use serde::{Deserialize, Serialize};

use crate::Error;

/// One reviewer correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Edit {
    Delete {
        id: u32,
    },
    Merge {
        ids: Vec<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        class: Option<ClassLabel>,
    },
    Split {
        id: u32,
        polygon_a: Polygon,
        polygon_b: Polygon,
    },
    Redraw {
        id: u32,
        polygon: Polygon,
    },
    Reclassify {
        id: u32,
        class: ClassLabel,
    },
    Rotate {
        id: u32,
        degrees: f64,
    },
    Flip {
        id: u32,
    },
}

/// Probability vector encoding a reviewer's choice: half the mass on the
/// chosen class, the rest spread evenly. Unknown gets the uniform vector.
pub fn asserted_probs(class: ClassLabel) -> Vec<f64> {
    match class.index() {
        None => uniform_probs(),
        Some(i) => {
            let rest = 0.5 / (NUM_CLASSES - 1) as f64;
            (0..NUM_CLASSES).map(|k| if k == i { 0.5 } else { rest }).collect()
        }
    }
}

fn position(set: &[Annotation], id: u32) -> Result<usize, Error> {
    set.iter().position(|a| a.id == id).ok_or(Error::UnknownAnnotation(id))
}

fn next_id(set: &[Annotation]) -> u32 {
    set.iter().map(|a| a.id).max().unwrap_or(0) + 1
}

/// Rasterizes a user polygon; rejects degenerate shapes and shapes that
/// leave the `width × height` image.
fn checked_mask(p: &Polygon, width: usize, height: usize) -> Result<RegionMask, Error> {
    if p.len() < 3 || p.vertices.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidEdit("polygon needs at least three finite vertices".into()));
    }
    if p.vertices.iter().any(|[x, y]| *x < 0.0 || *y < 0.0 || *x > width as f64 || *y > height as f64) {
        return Err(Error::InvalidEdit(format!("polygon leaves the {width}x{height} image")));
    }
    p.rasterize()
        .ok_or_else(|| Error::InvalidEdit("polygon covers no pixel".into()))
}

/// Applies `edit` to an annotation list on a `width × height` image and
/// returns the new list. Pure and deterministic, so replaying the audit log
/// reproduces every stored version bit for bit.
pub fn apply(set: &[Annotation], edit: &Edit, width: usize, height: usize) -> Result<Vec<Annotation>, Error> {
    let mut out = set.to_vec();
    match edit {
        Edit::Delete { id } => {
            out.remove(position(set, *id)?);
        }
        Edit::Merge { ids, class } => {
            let mut unique = ids.clone();
            unique.sort_unstable();
            unique.dedup();
            if unique.len() < 2 || unique.len() != ids.len() {
                return Err(Error::InvalidEdit("merge needs at least two distinct ids".into()));
            }
            let members: Vec<&Annotation> = ids.iter().map(|id| position(set, *id).map(|i| &set[i])).collect::<Result<_, _>>()?;
            let masks: Vec<RegionMask> = members
                .iter()
                .map(|a| {
                    a.polygon
                        .rasterize()
                        .ok_or_else(|| Error::InvalidEdit(format!("annotation {} covers no pixel", a.id)))
                })
                .collect::<Result<_, _>>()?;
            let union = masks[1..].iter().fold(masks[0].clone(), |acc, m| acc.union(m));
            if connected_components(&union.mask, Connectivity::Eight).components.len() != 1 {
                return Err(Error::InvalidEdit("merged region is not connected".into()));
            }
            let polygon = trace_boundary(&union).expect("union is nonempty");
            let label = class.unwrap_or(ClassLabel::Unknown);
            let merged = Annotation {
                id: next_id(set),
                polygon,
                class_label: label,
                class_probs: asserted_probs(label),
                rotation: members[0].rotation,
                score: members.iter().map(|a| a.score).fold(0.0, f64::max),
                user_asserted: class.is_some(),
            };
            out.retain(|a| !ids.contains(&a.id));
            out.push(merged);
        }
        Edit::Split { id, polygon_a, polygon_b } => {
            let i = position(set, *id)?;
            let a = checked_mask(polygon_a, width, height)?;
            let b = checked_mask(polygon_b, width, height)?;
            if a.intersection_count(&b) == a.area().min(b.area()) {
                return Err(Error::InvalidEdit("split halves must differ".into()));
            }
            let original = out.remove(i);
            let first = next_id(set);
            for (k, polygon) in [polygon_a, polygon_b].into_iter().enumerate() {
                out.push(Annotation {
                    id: first + k as u32,
                    polygon: polygon.clone(),
                    ..original.clone()
                });
            }
        }
        Edit::Redraw { id, polygon } => {
            let i = position(set, *id)?;
            checked_mask(polygon, width, height)?;
            out[i].polygon = polygon.clone();
        }
        Edit::Reclassify { id, class } => {
            let i = position(set, *id)?;
            out[i].class_label = *class;
            out[i].class_probs = asserted_probs(*class);
            out[i].user_asserted = true;
        }
        Edit::Rotate { id, degrees } => {
            let i = position(set, *id)?;
            if !degrees.is_finite() {
                return Err(Error::InvalidEdit("rotation must be finite".into()));
            }
            out[i].rotation = Rotation::from_degrees(out[i].rotation.degrees() + degrees);
        }
        Edit::Flip { id } => {
            let i = position(set, *id)?;
            let r = out[i].rotation;
            out[i].rotation = Rotation { sin: -r.sin, cos: r.cos };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(id: u32, x: f64, y: f64, s: f64, class: ClassLabel) -> Annotation {
        Annotation {
            id,
            polygon: Polygon::new(vec![[x, y], [x + s, y], [x + s, y + s], [x, y + s]]),
            class_label: class,
            class_probs: uniform_probs(),
            rotation: Rotation::UPRIGHT,
            score: 0.5 + id as f64 / 100.0,
            user_asserted: false,
        }
    }

    #[test]
    fn merge_of_adjacent_squares_covers_their_pixels() {
        for side in [2.0, 4.0] {
            let set = vec![square(1, 2.0, 2.0, side, ClassLabel::Autosome(1)), square(2, 2.0 + side, 2.0, side, ClassLabel::Autosome(1))];
            let merged = apply(&set, &Edit::Merge { ids: vec![1, 2], class: Some(ClassLabel::Autosome(3)) }, 20, 20).unwrap();
            assert_eq!(merged.len(), 1);
            let m = merged[0].polygon.rasterize().unwrap();
            // Brute force over the grid: the merged pixels are exactly the union.
            let expected: Vec<(usize, usize)> = (0..20)
                .flat_map(|y| (0..20).map(move |x| (x, y)))
                .filter(|&(x, y)| set.iter().any(|a| a.polygon.rasterize().unwrap().contains(x, y)))
                .collect();
            assert_eq!(m.pixels().collect::<Vec<_>>(), expected);
            assert_eq!(expected.len(), 2 * (side * side) as usize);
            assert_eq!(merged[0].class_label, ClassLabel::Autosome(3));
            assert!(merged[0].user_asserted);
            assert_eq!(merged[0].id, 3);
        }
    }

    #[test]
    fn disconnected_merge_is_rejected() {
        let set = vec![square(1, 0.0, 0.0, 2.0, ClassLabel::X), square(2, 10.0, 10.0, 2.0, ClassLabel::X)];
        assert!(matches!(apply(&set, &Edit::Merge { ids: vec![1, 2], class: None }, 20, 20), Err(Error::InvalidEdit(_))));
        assert!(apply(&set, &Edit::Merge { ids: vec![1, 1], class: None }, 20, 20).is_err());
    }

    #[test]
    fn field_edits() {
        let set = vec![square(1, 0.0, 0.0, 4.0, ClassLabel::Autosome(7))];
        let r = apply(&set, &Edit::Reclassify { id: 1, class: ClassLabel::Y }, 10, 10).unwrap();
        assert_eq!(r[0].class_label, ClassLabel::Y);
        assert!((r[0].class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(kayra_core::cascade::argmax(&r[0].class_probs), ClassLabel::Y.index());
        let r = apply(&set, &Edit::Rotate { id: 1, degrees: 30.0 }, 10, 10).unwrap();
        assert!((r[0].rotation.degrees() - 30.0).abs() < 1e-9);
        let f = apply(&r, &Edit::Flip { id: 1 }, 10, 10).unwrap();
        assert!((f[0].rotation.degrees() + 30.0).abs() < 1e-9);
        assert!(apply(&set, &Edit::Delete { id: 1 }, 10, 10).unwrap().is_empty());
        assert!(matches!(apply(&set, &Edit::Delete { id: 9 }, 10, 10), Err(Error::UnknownAnnotation(9))));
    }

    #[test]
    fn split_and_redraw_validate_polygons() {
        let set = vec![square(1, 0.0, 0.0, 8.0, ClassLabel::Autosome(2))];
        let left = Polygon::new(vec![[0.0, 0.0], [4.0, 0.0], [4.0, 8.0], [0.0, 8.0]]);
        let right = Polygon::new(vec![[4.0, 0.0], [8.0, 0.0], [8.0, 8.0], [4.0, 8.0]]);
        let s = apply(&set, &Edit::Split { id: 1, polygon_a: left.clone(), polygon_b: right }, 10, 10).unwrap();
        assert_eq!(s.iter().map(|a| a.id).collect::<Vec<_>>(), vec![2, 3]);
        assert!(s.iter().all(|a| a.class_label == ClassLabel::Autosome(2)));
        assert!(apply(&set, &Edit::Split { id: 1, polygon_a: left.clone(), polygon_b: left.clone() }, 10, 10).is_err());
        let outside = Polygon::new(vec![[0.0, 0.0], [40.0, 0.0], [40.0, 8.0]]);
        assert!(apply(&set, &Edit::Redraw { id: 1, polygon: outside }, 10, 10).is_err());
        let line = Polygon::new(vec![[0.0, 0.0], [4.0, 0.0]]);
        assert!(apply(&set, &Edit::Redraw { id: 1, polygon: line }, 10, 10).is_err());
    }

    #[test]
    fn wire_format() {
        let e: Edit = serde_json::from_str(r#"{"op":"merge","ids":[1,2],"class":"21"}"#).unwrap();
        assert_eq!(e, Edit::Merge { ids: vec![1, 2], class: Some(ClassLabel::Autosome(21)) });
        let e: Edit = serde_json::from_str(r#"{"op":"flip","id":4}"#).unwrap();
        assert_eq!(serde_json::to_string(&e).unwrap(), r#"{"op":"flip","id":4}"#);
        assert!(serde_json::from_str::<Edit>(r#"{"op":"paint","id":4}"#).is_err());
    }
}
