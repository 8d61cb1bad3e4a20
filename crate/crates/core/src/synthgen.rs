//! Deterministic synthetic metaphase spreads with exact ground truth.
//!
//! Chromosomes are rendered as slightly bent capsules whose length follows a
//! fixed monotone size table (class 1 longest, class 22 shortest, X among the
//! 6–12 group, Y among 21–22), striped with dark/light transverse bands.
//! Placement keeps every undeclared pair at least `min_gap` pixels apart;
//! declared overlap pairs cross, declared touching pairs are 8-adjacent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{Annotation, ClassLabel, Rotation, NUM_CLASSES};
use crate::imaging::polygon::trace_boundary;
use crate::imaging::{BinaryMask, Raster, Rect, RegionMask};
use crate::protocol::RleMask;

/// Capsule width shared by all classes.
pub const CHROMOSOME_WIDTH: f64 = 18.0;

/// Rendered length along the axis, in pixels.
pub fn class_length(label: ClassLabel) -> f64 {
    match label {
        ClassLabel::Autosome(n) => 176.0 - 6.0 * (n as f64 - 1.0),
        ClassLabel::X => 137.0,
        ClassLabel::Y => 53.0,
        ClassLabel::Unknown => 100.0,
    }
}

/// Area of the straight capsule with the class length; bending preserves it
/// up to rasterization.
pub fn expected_area(label: ClassLabel) -> f64 {
    let w = CHROMOSOME_WIDTH;
    (class_length(label) - w) * w + std::f64::consts::PI * w * w / 4.0
}

/// Two of each autosome plus the given sex chromosomes.
pub fn karyotype(sex: &[ClassLabel]) -> Vec<ClassLabel> {
    (1..=22u8)
        .flat_map(|n| [ClassLabel::Autosome(n); 2])
        .chain(sex.iter().copied())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandModel {
    pub dark: u8,
    pub light: u8,
    /// Band thickness along the chromosome axis.
    pub period: f64,
    /// Uniform noise amplitude added to chromosome pixels.
    pub noise: u8,
    pub background_noise: u8,
}

impl Default for BandModel {
    fn default() -> Self {
        Self {
            dark: 50,
            light: 120,
            period: 9.0,
            noise: 6,
            background_noise: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub image_id: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub classes: Vec<ClassLabel>,
    pub overlap_pairs: usize,
    pub touching_pairs: usize,
    pub background: u8,
    pub bands: BandModel,
    /// Place one chromosome within 5 px of the left canvas edge.
    pub border_adjacent: bool,
    /// Minimum pixel gap (Chebyshev) between undeclared pairs.
    pub min_gap: usize,
    /// Chromosome centres are drawn from a centred disk of this radius,
    /// as a fraction of the shorter canvas side.
    pub spread_radius: f64,
    pub max_attempts: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_id: "spread".into(),
            seed: 0,
            width: 1830,
            height: 1830,
            classes: karyotype(&[ClassLabel::X, ClassLabel::X]),
            overlap_pairs: 0,
            touching_pairs: 0,
            background: 235,
            bands: BandModel::default(),
            border_adjacent: false,
            min_gap: 6,
            spread_radius: 0.32,
            max_attempts: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("could not place chromosome {index} after {attempts} attempts")]
    PlacementFailure { index: usize, attempts: usize },
}

impl SyntheticSpec {
    pub fn chromosome_count(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.classes.iter().any(|c| *c == ClassLabel::Unknown) {
            return bad("Unknown cannot be rendered".into());
        }
        if self.overlap_pairs + self.touching_pairs > self.classes.len() / 2 {
            return bad(format!(
                "{} overlap + {} touching pairs exceed {} chromosomes",
                self.overlap_pairs,
                self.touching_pairs,
                self.classes.len()
            ));
        }
        let fg_max = self.bands.dark.max(self.bands.light) as i32 + self.bands.noise as i32;
        if fg_max > self.background as i32 - self.bands.background_noise as i32 - 40 {
            return bad("band intensities must stay 40 below the background".into());
        }
        if self.width < 64 || self.height < 64 {
            return bad("canvas too small".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GtInstanceRepr", try_from = "GtInstanceRepr")]
pub struct GtInstance {
    pub id: u32,
    pub class_label: ClassLabel,
    /// Axis angle in (-90, 90], 0 = vertical, positive = clockwise.
    pub angle_degrees: f64,
    pub centroid: (f64, f64),
    pub mask: RegionMask,
}

#[derive(Serialize, Deserialize)]
struct GtInstanceRepr {
    id: u32,
    class: ClassLabel,
    angle_degrees: f64,
    centroid: [f64; 2],
    bbox: Rect,
    rle: RleMask,
}

impl From<GtInstance> for GtInstanceRepr {
    fn from(g: GtInstance) -> Self {
        Self {
            id: g.id,
            class: g.class_label,
            angle_degrees: g.angle_degrees,
            centroid: [g.centroid.0, g.centroid.1],
            bbox: g.mask.window(),
            rle: RleMask::encode(&g.mask.mask),
        }
    }
}

impl TryFrom<GtInstanceRepr> for GtInstance {
    type Error = String;

    fn try_from(r: GtInstanceRepr) -> Result<Self, Self::Error> {
        if (r.rle.width, r.rle.height) != (r.bbox.w, r.bbox.h) {
            return Err("rle dimensions differ from bbox".into());
        }
        let mask = r.rle.decode().map_err(|e| e.to_string())?;
        Ok(Self {
            id: r.id,
            class_label: r.class,
            angle_degrees: r.angle_degrees,
            centroid: (r.centroid[0], r.centroid[1]),
            mask: RegionMask::new((r.bbox.x0, r.bbox.y0), mask),
        })
    }
}

/// Ground truth sidecar of one spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub instances: Vec<GtInstance>,
    pub overlap_pairs: Vec<[u32; 2]>,
    pub touching_pairs: Vec<[u32; 2]>,
}

impl GroundTruth {
    pub fn instance(&self, id: u32) -> Option<&GtInstance> {
        self.instances.iter().find(|g| g.id == id)
    }
}

/// Capsule geometry before rasterization.
#[derive(Debug, Clone, Copy)]
struct Capsule {
    cx: f64,
    cy: f64,
    angle: f64,
    length: f64,
    bend: f64,
}

const CENTERLINE_SEGMENTS: usize = 12;

impl Capsule {
    fn half_axis(&self) -> f64 {
        (self.length - CHROMOSOME_WIDTH) / 2.0
    }

    /// Axis-aligned rectangle guaranteed to hold the rasterized capsule.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let r = self.length / 2.0 + self.bend.abs() + 2.0;
        (self.cx - r, self.cy - r, self.cx + r, self.cy + r)
    }

    fn centerline(&self) -> [(f64, f64); CENTERLINE_SEGMENTS + 1] {
        let h = self.half_axis();
        let mut pts = [(0.0, 0.0); CENTERLINE_SEGMENTS + 1];
        for (k, p) in pts.iter_mut().enumerate() {
            let t = -1.0 + 2.0 * k as f64 / CENTERLINE_SEGMENTS as f64;
            *p = (self.bend * (1.0 - t * t), t * h);
        }
        pts
    }

    /// Local frame: y along the axis (top = negative), x across.
    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.to_radians().sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Rasterizes into a region mask clipped to the canvas. Returns `None`
    /// when the capsule leaves the canvas.
    fn rasterize(&self, width: usize, height: usize) -> Option<RegionMask> {
        let (x0, y0, x1, y1) = self.bounds();
        let clip = |v: f64, hi: usize| v.max(0.0).min(hi as f64);
        let window = Rect::from_bounds(
            clip(x0.floor(), width) as usize,
            clip(y0.floor(), height) as usize,
            clip(x1.ceil(), width) as usize,
            clip(y1.ceil(), height) as usize,
        )?;
        let line = self.centerline();
        let r2 = (CHROMOSOME_WIDTH / 2.0).powi(2);
        let region = RegionMask::from_fn(window, |x, y| {
            let (lx, ly) = self.to_local(x as f64 + 0.5, y as f64 + 0.5);
            line.windows(2).any(|seg| dist2_to_segment((lx, ly), seg[0], seg[1]) <= r2)
        })
        .trimmed()?;
        // A shape reaching a canvas edge would be cut off there.
        let b = region.window();
        if b.x0 == 0 || b.y0 == 0 || b.x1() == width || b.y1() == height {
            return None;
        }
        Some(region)
    }
}

fn dist2_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p.0 - a.0 - t * vx, p.1 - a.1 - t * vy);
    dx * dx + dy * dy
}

/// Folds an axis angle into (-90, 90].
pub fn fold_axis_angle(deg: f64) -> f64 {
    let a = deg.rem_euclid(180.0);
    if a > 90.0 {
        a - 180.0
    } else {
        a
    }
}

const FREE: u16 = 0;
const MULTI: u16 = u16::MAX;

/// Occupancy bookkeeping: `halo` marks every pixel within `min_gap` of a
/// placed mask with its owner (or MULTI), `owner` marks the mask pixels.
struct Canvas {
    width: usize,
    height: usize,
    gap: usize,
    halo: Vec<u16>,
    owner: Vec<u16>,
}

impl Canvas {
    fn new(width: usize, height: usize, gap: usize) -> Self {
        Self {
            width,
            height,
            gap,
            halo: vec![FREE; width * height],
            owner: vec![FREE; width * height],
        }
    }

    /// True when the mask stays clear of every placed instance except those
    /// listed in `allowed`.
    fn is_clear(&self, mask: &RegionMask, allowed: &[u16]) -> bool {
        mask.pixels().all(|(x, y)| {
            let h = self.halo[y * self.width + x];
            h == FREE || (h != MULTI && allowed.contains(&h))
        })
    }

    fn place(&mut self, id: u16, mask: &RegionMask) {
        let g = self.gap;
        for (x, y) in mask.pixels() {
            self.owner[y * self.width + x] = id;
            for yy in y.saturating_sub(g)..(y + g + 1).min(self.height) {
                for xx in x.saturating_sub(g)..(x + g + 1).min(self.width) {
                    let h = &mut self.halo[yy * self.width + xx];
                    *h = match *h {
                        FREE => id,
                        other if other == id => id,
                        _ => MULTI,
                    };
                }
            }
        }
    }
}

struct Placed {
    index: usize,
    capsule: Capsule,
    mask: RegionMask,
}

/// Renders a spread and its ground truth. Pure function of the spec.
pub fn generate_spread(spec: &SyntheticSpec) -> Result<(Raster, GroundTruth), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut canvas = Canvas::new(spec.width, spec.height, spec.min_gap);
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    let mut overlap_pairs = Vec::new();
    let mut touching_pairs = Vec::new();
    let mut cursor = 0;

    let take = |cursor: &mut usize| {
        let i = order[*cursor];
        *cursor += 1;
        i
    };

    for pair_kind in [PairKind::Overlap, PairKind::Touching] {
        let count = match pair_kind {
            PairKind::Overlap => spec.overlap_pairs,
            PairKind::Touching => spec.touching_pairs,
        };
        for _ in 0..count {
            let a = take(&mut cursor);
            let b = take(&mut cursor);
            let (pa, pb) = place_pair(spec, &mut rng, &canvas, a, b, pair_kind)?;
            canvas.place(a as u16 + 1, &pa.mask);
            canvas.place(b as u16 + 1, &pb.mask);
            let ids = [a as u32 + 1, b as u32 + 1];
            let ids = [ids[0].min(ids[1]), ids[0].max(ids[1])];
            match pair_kind {
                PairKind::Overlap => overlap_pairs.push(ids),
                PairKind::Touching => touching_pairs.push(ids),
            }
            placed.push(pa);
            placed.push(pb);
        }
    }
    let mut first_single = true;
    while cursor < n {
        let i = take(&mut cursor);
        let border = spec.border_adjacent && first_single;
        first_single = false;
        let p = place_single(spec, &mut rng, &canvas, i, border)?;
        canvas.place(i as u16 + 1, &p.mask);
        placed.push(p);
    }
    overlap_pairs.sort_unstable();
    touching_pairs.sort_unstable();

    placed.sort_by_key(|p| p.index);
    let raster = render(spec, &mut rng, &placed);
    let instances = placed
        .into_iter()
        .map(|p| GtInstance {
            id: p.index as u32 + 1,
            class_label: spec.classes[p.index],
            angle_degrees: fold_axis_angle(p.capsule.angle),
            centroid: p.mask.centroid().expect("placed masks are nonempty"),
            mask: p.mask,
        })
        .collect();
    Ok((
        raster,
        GroundTruth {
            image_id: spec.image_id.clone(),
            width: spec.width,
            height: spec.height,
            seed: spec.seed,
            instances,
            overlap_pairs,
            touching_pairs,
        },
    ))
}

#[derive(Clone, Copy, PartialEq)]
enum PairKind {
    Overlap,
    Touching,
}

fn random_capsule(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, index: usize) -> Capsule {
    let radius = spec.spread_radius * spec.width.min(spec.height) as f64;
    let r = radius * rng.gen::<f64>().sqrt();
    let phi = rng.gen::<f64>() * std::f64::consts::TAU;
    let length = class_length(spec.classes[index]);
    Capsule {
        cx: spec.width as f64 / 2.0 + r * phi.cos(),
        cy: spec.height as f64 / 2.0 + r * phi.sin(),
        angle: rng.gen_range(-90.0..90.0),
        length,
        bend: rng.gen_range(-0.06..0.06) * length,
    }
}

fn place_single(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    canvas: &Canvas,
    index: usize,
    border: bool,
) -> Result<Placed, SynthError> {
    for _ in 0..spec.max_attempts {
        let mut capsule = random_capsule(spec, rng, index);
        if border {
            // Start at the left edge; shift so the bbox begins 1..=5 px in.
            capsule.cx = capsule.length;
            let Some(m) = capsule.rasterize(spec.width, spec.height) else {
                continue;
            };
            let target = rng.gen_range(1..=5) as f64;
            capsule.cx -= m.window().x0 as f64 - target;
        }
        let Some(mask) = capsule.rasterize(spec.width, spec.height) else {
            continue;
        };
        if canvas.is_clear(&mask, &[]) {
            return Ok(Placed {
                index,
                capsule,
                mask,
            });
        }
    }
    Err(SynthError::PlacementFailure {
        index,
        attempts: spec.max_attempts,
    })
}

fn place_pair(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    canvas: &Canvas,
    a: usize,
    b: usize,
    kind: PairKind,
) -> Result<(Placed, Placed), SynthError> {
    for _ in 0..spec.max_attempts {
        let Ok(first) = place_single(spec, rng, canvas, a, false) else {
            break;
        };
        let mut partner = random_capsule(spec, rng, b);
        if kind == PairKind::Overlap {
            // Crossing pairs need clearly different axes.
            let delta = rng.gen_range(40.0..90.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            partner.angle = first.capsule.angle + delta;
        }
        // Approach `first` from a random direction in half-pixel steps.
        let dir = rng.gen::<f64>() * std::f64::consts::TAU;
        let (ux, uy) = (dir.cos(), dir.sin());
        let start = (first.capsule.length + partner.length) / 2.0 + spec.min_gap as f64 + 4.0;
        let mut dist = start;
        let small = expected_area(spec.classes[a]).min(expected_area(spec.classes[b]));
        while dist > 0.0 {
            partner.cx = first.capsule.cx + ux * dist;
            partner.cy = first.capsule.cy + uy * dist;
            dist -= 0.5;
            let Some(mask) = partner.rasterize(spec.width, spec.height) else {
                continue;
            };
            let shared = mask.intersection_count(&first.mask);
            let accept = match kind {
                PairKind::Touching => {
                    if shared > 0 {
                        break;
                    }
                    touches(&mask, &first.mask)
                }
                PairKind::Overlap => {
                    let frac = shared as f64 / small;
                    if frac > 0.20 {
                        break;
                    }
                    frac >= 0.05
                }
            };
            if !accept {
                continue;
            }
            // The pair as a whole must keep clear of everything else.
            if canvas.is_clear(&mask, &[]) {
                let overlap_frac = shared as f64 / mask.area().min(first.mask.area()) as f64;
                if kind == PairKind::Overlap && !(0.05..=0.20).contains(&overlap_frac) {
                    break;
                }
                let second = Placed {
                    index: b,
                    capsule: partner,
                    mask,
                };
                return Ok((first, second));
            }
            break;
        }
    }
    Err(SynthError::PlacementFailure {
        index: b,
        attempts: spec.max_attempts,
    })
}

/// 8-adjacent without sharing pixels.
fn touches(a: &RegionMask, b: &RegionMask) -> bool {
    a.pixels().any(|(x, y)| {
        (-1i64..=1).any(|dy| {
            (-1i64..=1).any(|dx| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx >= 0 && ny >= 0 && b.contains(nx as usize, ny as usize)
            })
        })
    })
}

fn band_is_dark(label: ClassLabel, k: usize) -> bool {
    let class = label.index().unwrap_or(24) as u64;
    let mut h = class.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 31;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 29;
    h & 1 == 1
}

fn render(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, placed: &[Placed]) -> Raster {
    let bn = spec.bands.background_noise as i32;
    let mut raster = Raster::from_fn(spec.width, spec.height, |_, _| {
        (spec.background as i32 + rng.gen_range(-bn..=bn)).clamp(0, 255) as u8
    });
    let fn_amp = spec.bands.noise as i32;
    for p in placed {
        let label = spec.classes[p.index];
        let half = p.capsule.length / 2.0;
        for (x, y) in p.mask.pixels() {
            let (_, ly) = p.capsule.to_local(x as f64 + 0.5, y as f64 + 0.5);
            let k = ((ly + half).max(0.0) / spec.bands.period) as usize;
            let base = if band_is_dark(label, k) {
                spec.bands.dark
            } else {
                spec.bands.light
            };
            let v = (base as i32 + rng.gen_range(-fn_amp..=fn_amp)).clamp(0, 255) as u8;
            // Overlapping chromatin renders as the darker of the two.
            let current = raster.get(x, y);
            raster.set(x, y, current.min(v));
        }
    }
    raster
}

/// Full-frame union of all ground-truth masks.
pub fn foreground_mask(gt: &GroundTruth) -> BinaryMask {
    let mut m = BinaryMask::empty(gt.width, gt.height);
    for inst in &gt.instances {
        for (x, y) in inst.mask.pixels() {
            m.set(x, y, true);
        }
    }
    m
}

/// Ground truth expressed as pipeline output: traced polygons, one-hot
/// probabilities and the true axis angle. Ids follow the instance ids.
pub fn ground_truth_annotations(gt: &GroundTruth) -> Vec<Annotation> {
    gt.instances
        .iter()
        .filter_map(|g| {
            let mut probs = vec![0.0; NUM_CLASSES];
            if let Some(i) = g.class_label.index() {
                probs[i] = 1.0;
            }
            Some(Annotation {
                id: g.id,
                polygon: trace_boundary(&g.mask)?,
                class_label: g.class_label,
                class_probs: probs,
                rotation: Rotation::from_degrees(g.angle_degrees),
                score: 1.0,
                user_asserted: false,
            })
        })
        .collect()
}
