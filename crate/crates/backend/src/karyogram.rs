use kayra_core::cascade::{Annotation, ClassLabel};
use kayra_core::imaging::{rotation_frame, Raster};
use serde::{Deserialize, Serialize};

/// Karyogram rows in display order.
pub const GROUP_NAMES: [&str; 9] = ["1–3", "4–5", "6–12", "13–15", "16–18", "19–22", "X", "Y", "Unknown"];

/// Row of `GROUP_NAMES` holding `label`.
pub fn group_index(label: ClassLabel) -> usize {
    match label {
        ClassLabel::Autosome(1..=3) => 0,
        ClassLabel::Autosome(4..=5) => 1,
        ClassLabel::Autosome(6..=12) => 2,
        ClassLabel::Autosome(13..=15) => 3,
        ClassLabel::Autosome(16..=18) => 4,
        ClassLabel::Autosome(19..=22) => 5,
        ClassLabel::X => 6,
        ClassLabel::Y => 7,
        ClassLabel::Autosome(_) | ClassLabel::Unknown => 8,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KaryogramGroup {
    pub name: String,
    pub members: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KaryogramLayout {
    pub groups: Vec<KaryogramGroup>,
}

/// Chromosome turned upright: pixels outside the mask are white. When no
/// source image is given the silhouette is drawn black.
struct UprightPatch {
    patch: Raster,
}

fn upright(a: &Annotation, original: Option<&Raster>) -> Option<UprightPatch> {
    let mask = a.polygon.rasterize()?;
    let bbox = mask.bbox()?;
    let (cw, ch, fwd) = rotation_frame(bbox.w, bbox.h, -a.rotation.degrees());
    let inv = fwd.inverse()?;
    let mut rows = (usize::MAX, 0);
    let mut cols = (usize::MAX, 0);
    let mut sampled = vec![None; cw * ch];
    for j in 0..ch {
        for i in 0..cw {
            let (u, v) = inv.apply(i as f64 + 0.5, j as f64 + 0.5);
            if u < 0.0 || v < 0.0 {
                continue;
            }
            let (x, y) = (bbox.x0 + u.floor() as usize, bbox.y0 + v.floor() as usize);
            if !mask.contains(x, y) {
                continue;
            }
            let value = match original {
                Some(img) if x < img.width() && y < img.height() => img.get(x, y),
                Some(_) => 255,
                None => 0,
            };
            sampled[j * cw + i] = Some(value);
            rows = (rows.0.min(j), rows.1.max(j + 1));
            cols = (cols.0.min(i), cols.1.max(i + 1));
        }
    }
    if rows.0 >= rows.1 {
        return None;
    }
    let patch = Raster::from_fn(cols.1 - cols.0, rows.1 - rows.0, |x, y| {
        sampled[(y + rows.0) * cw + x + cols.0].unwrap_or(255)
    });
    Some(UprightPatch { patch })
}

/// Height of the chromosome after it is rotated upright.
pub fn upright_height(a: &Annotation) -> usize {
    upright(a, None).map_or(0, |p| p.patch.height())
}

fn ordered_groups(annotations: &[Annotation], original: Option<&Raster>) -> Vec<Vec<(Option<UprightPatch>, u32)>> {
    let mut keyed: Vec<(usize, ClassLabel, usize, u32, Option<UprightPatch>)> = annotations
        .iter()
        .map(|a| {
            let p = upright(a, original);
            let h = p.as_ref().map_or(0, |p| p.patch.height());
            (group_index(a.class_label), a.class_label, h, a.id, p)
        })
        .collect();
    // Class ascending, then taller first; id breaks remaining ties.
    keyed.sort_by(|a, b| (a.0, a.1, std::cmp::Reverse(a.2), a.3).cmp(&(b.0, b.1, std::cmp::Reverse(b.2), b.3)));
    let mut groups: Vec<Vec<(Option<UprightPatch>, u32)>> = (0..GROUP_NAMES.len()).map(|_| Vec::new()).collect();
    for (g, _, _, id, p) in keyed {
        groups[g].push((p, id));
    }
    groups
}

/// Assigns every annotation to its group, ordered by class and then by
/// descending upright height.
pub fn compose_karyogram(annotations: &[Annotation]) -> KaryogramLayout {
    let groups = ordered_groups(annotations, None);
    KaryogramLayout {
        groups: GROUP_NAMES
            .iter()
            .zip(groups)
            .map(|(name, members)| KaryogramGroup {
                name: name.to_string(),
                members: members.into_iter().map(|(_, id)| id).collect(),
            })
            .collect(),
    }
}

const MARGIN: usize = 16;
const GAP: usize = 12;
const EMPTY_ROW: usize = 24;
const RULE: u8 = 180;

/// Draws the karyogram: one band per group separated by grey rules, each
/// chromosome cut from `original` and rotated upright.
pub fn render_karyogram(annotations: &[Annotation], original: &Raster) -> Raster {
    let groups = ordered_groups(annotations, Some(original));
    let bands: Vec<(usize, usize)> = groups
        .iter()
        .map(|g| {
            let patches: Vec<&Raster> = g.iter().filter_map(|(p, _)| p.as_ref().map(|p| &p.patch)).collect();
            let w = patches.iter().map(|p| p.width()).sum::<usize>() + GAP * patches.len().saturating_sub(1);
            let h = patches.iter().map(|p| p.height()).max().unwrap_or(0).max(EMPTY_ROW);
            (w, h)
        })
        .collect();
    let width = bands.iter().map(|b| b.0).max().unwrap_or(0).max(EMPTY_ROW) + 2 * MARGIN;
    let height = bands.iter().map(|b| b.1 + 2 * MARGIN + 1).sum::<usize>();
    let mut canvas = Raster::filled(width, height, 255);
    let mut top = 0;
    for (g, (_, band_h)) in groups.iter().zip(&bands) {
        let baseline = top + MARGIN + band_h;
        let mut x = MARGIN;
        for patch in g.iter().filter_map(|(p, _)| p.as_ref()) {
            let p = &patch.patch;
            let y0 = baseline - p.height();
            for y in 0..p.height() {
                for dx in 0..p.width() {
                    canvas.set(x + dx, y0 + y, p.get(dx, y));
                }
            }
            x += p.width() + GAP;
        }
        top = baseline + MARGIN;
        for x in 0..width {
            canvas.set(x, top, RULE);
        }
        top += 1;
    }
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;
    use kayra_core::cascade::{uniform_probs, Rotation};
    use kayra_core::imaging::Polygon;

    /// Upright `w × h` rectangle centred at (cx, cy), then turned by `deg`.
    fn bar(id: u32, class: ClassLabel, cx: f64, cy: f64, w: f64, h: f64, deg: f64) -> Annotation {
        let (s, c) = deg.to_radians().sin_cos();
        let corners = [[-w / 2.0, -h / 2.0], [w / 2.0, -h / 2.0], [w / 2.0, h / 2.0], [-w / 2.0, h / 2.0]];
        let vertices = corners.iter().map(|[x, y]| [cx + c * x - s * y, cy + s * x + c * y]).collect();
        Annotation {
            id,
            polygon: Polygon::new(vertices),
            class_label: class,
            class_probs: uniform_probs(),
            rotation: Rotation::from_degrees(deg),
            score: 1.0,
            user_asserted: false,
        }
    }

    #[test]
    fn every_label_has_exactly_one_group() {
        let labels: Vec<ClassLabel> = ClassLabel::all().chain([ClassLabel::Unknown]).collect();
        assert_eq!(labels.len(), 25);
        assert_eq!(group_index(ClassLabel::Autosome(7)), 2);
        assert_eq!(GROUP_NAMES[group_index(ClassLabel::X)], "X");
        assert_eq!(GROUP_NAMES[group_index(ClassLabel::Unknown)], "Unknown");
        let set: Vec<Annotation> = labels.iter().enumerate().map(|(i, l)| bar(i as u32 + 1, *l, 50.0 + 30.0 * i as f64, 60.0, 8.0, 30.0, 0.0)).collect();
        let layout = compose_karyogram(&set);
        let mut all: Vec<u32> = layout.groups.iter().flat_map(|g| g.members.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (1..=25).collect::<Vec<_>>());
    }

    #[test]
    fn empty_set_has_nine_empty_groups() {
        let layout = compose_karyogram(&[]);
        assert_eq!(layout.groups.len(), 9);
        assert!(layout.groups.iter().all(|g| g.members.is_empty()));
        let img = render_karyogram(&[], &Raster::filled(10, 10, 255));
        assert!(img.width() > 0 && img.height() > 0);
    }

    #[test]
    fn tilted_chromosomes_are_stood_up() {
        for deg in [-60.0, -20.0, 0.0, 35.0, 80.0] {
            let a = bar(1, ClassLabel::Autosome(1), 100.0, 100.0, 10.0, 60.0, deg);
            let p = upright(&a, None).unwrap().patch;
            assert!((p.height() as i64 - 60).abs() <= 2, "{deg}: {}x{}", p.width(), p.height());
            assert!((p.width() as i64 - 10).abs() <= 2, "{deg}: {}x{}", p.width(), p.height());
        }
    }

    #[test]
    fn within_group_order_is_class_then_height() {
        let set = vec![
            bar(1, ClassLabel::Autosome(7), 40.0, 50.0, 8.0, 30.0, 0.0),
            bar(2, ClassLabel::Autosome(6), 80.0, 50.0, 8.0, 20.0, 0.0),
            bar(3, ClassLabel::Autosome(7), 120.0, 50.0, 8.0, 40.0, 45.0),
            bar(4, ClassLabel::Autosome(6), 160.0, 50.0, 8.0, 36.0, 0.0),
        ];
        assert_eq!(compose_karyogram(&set).groups[2].members, vec![4, 2, 3, 1]);
    }

    #[test]
    fn render_copies_source_intensities() {
        let img = Raster::from_fn(200, 200, |x, _| if (95..105).contains(&x) { 40 } else { 250 });
        let a = bar(1, ClassLabel::Autosome(1), 100.0, 100.0, 10.0, 60.0, 0.0);
        let out = render_karyogram(&[a], &img);
        let dark = out.pixels().iter().filter(|&&v| v == 40).count();
        assert_eq!(dark, 600);
    }
}
