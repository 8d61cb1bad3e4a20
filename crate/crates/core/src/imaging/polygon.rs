//! Closed polygons over continuous pixel coordinates, mask boundary tracing
//! and polygon rasterization.
//!
//! Traced boundaries run along pixel edges, so their vertices sit on integer
//! corners and rasterizing a traced polygon (pixel centres inside, even-odd
//! rule) reproduces the traced region exactly, holes aside.

use serde::{Deserialize, Serialize};

use super::{connected_components, BinaryMask, Connectivity, Rect, RegionMask};

/// Closed vertex list; the last vertex connects back to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Self {
        Self { vertices }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Polygon {
        Polygon::new(self.vertices.iter().map(|[x, y]| [x + dx, y + dy]).collect())
    }

    /// Shoelace area; positive for clockwise-on-screen orientation.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let [x0, y0] = self.vertices[i];
                let [x1, y1] = self.vertices[(i + 1) % n];
                x0 * y1 - x1 * y0
            })
            .sum::<f64>()
            / 2.0
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn extent(&self) -> Option<(f64, f64, f64, f64)> {
        let first = self.vertices.first()?;
        Some(self.vertices.iter().fold(
            (first[0], first[1], first[0], first[1]),
            |(a, b, c, d), [x, y]| (a.min(*x), b.min(*y), c.max(*x), d.max(*y)),
        ))
    }

    fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// At least three vertices, finite coordinates, nonzero area and no two
    /// non-adjacent edges properly crossing. Boundaries that touch themselves
    /// at a single vertex (diagonal pinches of a traced mask) are accepted.
    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 || self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return false;
        }
        if self.signed_area().abs() < 1e-12 {
            return false;
        }
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in i + 1..n {
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if segments_cross(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return false;
                }
            }
        }
        true
    }

    /// Pixels whose centres lie inside (even-odd), clipped to non-negative
    /// coordinates. Returns `None` when no pixel centre is covered.
    pub fn rasterize(&self) -> Option<RegionMask> {
        let (min_x, min_y, max_x, max_y) = self.extent()?;
        let x0 = min_x.floor().max(0.0) as usize;
        let y0 = min_y.floor().max(0.0) as usize;
        let x1 = max_x.ceil().max(0.0) as usize;
        let y1 = max_y.ceil().max(0.0) as usize;
        let window = Rect::from_bounds(x0, y0, x1, y1)?;
        let mut mask = BinaryMask::empty(window.w, window.h);
        let mut crossings = Vec::new();
        for row in 0..window.h {
            let cy = (window.y0 + row) as f64 + 0.5;
            crossings.clear();
            for (a, b) in self.edges() {
                if (a[1] <= cy) != (b[1] <= cy) {
                    let t = (cy - a[1]) / (b[1] - a[1]);
                    crossings.push(a[0] + t * (b[0] - a[0]));
                }
            }
            crossings.sort_by(f64::total_cmp);
            for pair in crossings.chunks_exact(2) {
                // Pixel centres cx = x + 0.5 with pair[0] < cx < pair[1].
                let start = (pair[0] - 0.5).floor() + 1.0;
                let end = (pair[1] - 0.5).ceil() - 1.0;
                let mut x = start.max(window.x0 as f64);
                while x <= end && x < window.x1() as f64 {
                    mask.set(x as usize - window.x0, row, true);
                    x += 1.0;
                }
            }
        }
        RegionMask::new((window.x0, window.y0), mask).trimmed()
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// True for crossings and for collinear overlaps longer than a point.
fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    if d1 == 0.0 && d2 == 0.0 && d3 == 0.0 && d4 == 0.0 {
        // Collinear: reject overlaps, allow sharing a single endpoint.
        let shared = [a, b]
            .iter()
            .filter(|p| on_segment(c, d, **p) && **p != c && **p != d)
            .count()
            + [c, d]
                .iter()
                .filter(|p| on_segment(a, b, **p) && **p != a && **p != b)
                .count();
        return shared > 0 || (a == c && b == d) || (a == d && b == c);
    }
    false
}

/// Outer boundary of the largest 8-connected region of `mask`, in frame
/// coordinates, traced clockwise along pixel edges with collinear vertices
/// removed. `None` for an empty mask.
pub fn trace_boundary(mask: &RegionMask) -> Option<Polygon> {
    let largest = largest_component(mask)?;
    let m = &largest.mask;
    let (w, h) = (m.width() as i64, m.height() as i64);
    let filled = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize);

    // Topmost-leftmost pixel; its top-left corner is a convex boundary vertex.
    let start_idx = m.bits().iter().position(|&b| b)?;
    let start = ((start_idx as i64) % w, (start_idx as i64) / w);

    // Headings E, S, W, N in y-down coordinates; the region stays on the right.
    const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
    let mut pos = start;
    let mut dir = 0usize;
    let mut steps = 0usize;
    let mut vertices = Vec::new();
    loop {
        let right = pixel_ahead(pos, DIRS[dir], DIRS[(dir + 1) % 4], true);
        let left = pixel_ahead(pos, DIRS[dir], DIRS[(dir + 1) % 4], false);
        let turn = if filled(left.0, left.1) {
            3 // left
        } else if filled(right.0, right.1) {
            0
        } else {
            1 // right
        };
        if turn != 0 {
            vertices.push(pos);
        }
        dir = (dir + turn) % 4;
        if steps > 0 && pos == start && dir == 0 {
            break;
        }
        pos = (pos.0 + DIRS[dir].0, pos.1 + DIRS[dir].1);
        steps += 1;
    }
    // The start vertex is a corner reached with a turn; make sure it leads.
    if let Some(i) = vertices.iter().position(|&v| v == start) {
        vertices.rotate_left(i);
    }
    let (ox, oy) = (largest.origin.0 as f64, largest.origin.1 as f64);
    Some(Polygon::new(
        vertices
            .into_iter()
            .map(|(x, y)| [x as f64 + ox, y as f64 + oy])
            .collect(),
    ))
}

/// Top-left corner of the pixel diagonally ahead of vertex `pos` on the right
/// (`right = true`) or left side of heading `d`, where `r` is `d` turned right.
fn pixel_ahead(pos: (i64, i64), d: (i64, i64), r: (i64, i64), right: bool) -> (i64, i64) {
    let side = if right { 1 } else { -1 };
    // Centre = pos + d/2 + side * r/2; corner = centre - (1/2, 1/2). Work doubled.
    let cx2 = 2 * pos.0 + d.0 + side * r.0 - 1;
    let cy2 = 2 * pos.1 + d.1 + side * r.1 - 1;
    (cx2.div_euclid(2), cy2.div_euclid(2))
}

/// Largest 8-connected component (ties: first in row-major order).
pub fn largest_component(mask: &RegionMask) -> Option<RegionMask> {
    let labels = connected_components(&mask.mask, Connectivity::Eight);
    let best = labels
        .components
        .iter()
        .fold(None::<&super::Component>, |best, c| match best {
            Some(b) if b.area >= c.area => Some(b),
            _ => Some(c),
        })?;
    if labels.components.len() == 1 {
        return mask.trimmed();
    }
    let region = labels.region(best.id)?;
    Some(region.shifted(mask.origin.0, mask.origin.1))
}
