use serde::{Deserialize, Serialize};

use super::{Raster, Rect, RegionMask};

/// 2×3 affine map `[x', y'] = A [x, y] + t` over continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    /// Rotation about the origin; positive angles turn clockwise on screen
    /// (y points down).
    pub fn rotation(degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Self {
            m: [[c, -s, 0.0], [s, c, 0.0]],
        }
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Option<AffineTransform> {
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return None;
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some(Self {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &AffineTransform) -> AffineTransform {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let [[e, f, ux], [g, h, uy]] = next.m;
        Self {
            m: [
                [e * a + f * c, e * b + f * d, e * tx + f * ty + ux],
                [g * a + h * c, g * b + h * d, g * tx + h * ty + uy],
            ],
        }
    }

    /// Integer rectangle covering the image of `rect` under the transform.
    pub fn map_rect(&self, rect: &Rect) -> (f64, f64, f64, f64) {
        let corners = [
            (rect.x0 as f64, rect.y0 as f64),
            (rect.x1() as f64, rect.y0 as f64),
            (rect.x0 as f64, rect.y1() as f64),
            (rect.x1() as f64, rect.y1() as f64),
        ];
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (x, y) in corners {
            let (u, v) = self.apply(x, y);
            b = (b.0.min(u), b.1.min(v), b.2.max(u), b.3.max(v));
        }
        b
    }
}

/// Canvas size and source→canvas transform for rotating a `width × height`
/// frame by `degrees` with the canvas expanded to the rotated bounding box.
pub fn rotation_frame(width: usize, height: usize, degrees: f64) -> (usize, usize, AffineTransform) {
    let rot = AffineTransform::rotation(degrees);
    let (x0, y0, x1, y1) = rot.map_rect(&Rect::new(0, 0, width, height));
    // Absorb floating noise such as cos(90°) = 6e-17 before taking the ceiling.
    let cw = ((x1 - x0) - 1e-9).ceil().max(1.0) as usize;
    let ch = ((y1 - y0) - 1e-9).ceil().max(1.0) as usize;
    let shift = AffineTransform::translation(if x0 == 0.0 { 0.0 } else { -x0 }, if y0 == 0.0 { 0.0 } else { -y0 });
    (cw, ch, rot.then(&shift))
}

/// Rotates onto an expanded canvas. Samples are bilinear; positions that
/// fall outside the source take the nearest edge intensity.
pub fn rotate_expand(image: &Raster, degrees: f64) -> (Raster, AffineTransform) {
    let (w, h) = image.dims();
    let (cw, ch, fwd) = rotation_frame(w, h, degrees);
    let inv = fwd.inverse().expect("rotations are invertible");
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let out = Raster::from_fn(cw, ch, |i, j| {
        let (u, v) = inv.apply(i as f64 + 0.5, j as f64 + 0.5);
        let px = (u - 0.5).clamp(0.0, max_x);
        let py = (v - 0.5).clamp(0.0, max_y);
        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
        let top = image.get(x0, y0) as f64 * (1.0 - fx) + image.get(x1, y0) as f64 * fx;
        let bottom = image.get(x0, y1) as f64 * (1.0 - fx) + image.get(x1, y1) as f64 * fx;
        (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
    });
    (out, fwd)
}

/// Nearest-neighbour warp of a region mask through `transform` into a
/// destination frame of `dest_w × dest_h`. Returns `None` when nothing lands
/// inside the destination.
pub fn warp_region_mask(
    mask: &RegionMask,
    transform: &AffineTransform,
    dest_w: usize,
    dest_h: usize,
) -> Option<RegionMask> {
    let inv = transform.inverse()?;
    let src = mask.bbox()?;
    let (x0, y0, x1, y1) = transform.map_rect(&src);
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    let window = Rect::from_bounds(
        clamp(x0.floor() - 1.0, dest_w),
        clamp(y0.floor() - 1.0, dest_h),
        clamp(x1.ceil() + 1.0, dest_w),
        clamp(y1.ceil() + 1.0, dest_h),
    )?;
    RegionMask::from_fn(window, |i, j| {
        let (u, v) = inv.apply(i as f64 + 0.5, j as f64 + 0.5);
        u >= 0.0 && v >= 0.0 && mask.contains(u.floor() as usize, v.floor() as usize)
    })
    .trimmed()
}
