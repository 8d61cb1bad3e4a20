//! Deterministic raster primitives shared by every pipeline stage.
//!
//! Coordinates follow the usual image convention: `x` grows to the right,
//! `y` grows downwards, and pixel `(i, j)` covers the continuous square
//! `[i, i + 1) × [j, j + 1)` with its centre at `(i + 0.5, j + 0.5)`.

mod components;
mod mask;
pub mod polygon;
mod resize;
mod rotate;
mod threshold;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use components::{connected_components, Component, Connectivity, LabeledComponents};
pub use mask::{mask_iou, BinaryMask, RegionMask};
pub use polygon::Polygon;
pub use resize::{
    constrained_scale, pad_edge_replicate, resize_by_scale, resize_constrained, scaled_dim,
};
pub use rotate::{rotate_expand, rotation_frame, warp_region_mask, AffineTransform};
pub use threshold::{binarize, otsu_from_histogram, otsu_threshold, Polarity};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImagingError {
    #[error("histogram has a single populated intensity")]
    DegenerateHistogram,
    #[error("target {target_w}x{target_h} is smaller than source {source_w}x{source_h}")]
    TargetSmallerThanSource {
        source_w: usize,
        source_h: usize,
        target_w: usize,
        target_h: usize,
    },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid dimensions {width}x{height} for {len} samples")]
    InvalidDimensions {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("rectangle {0:?} lies outside the {1}x{2} frame")]
    RectOutOfBounds(Rect, usize, usize),
}

/// Axis-aligned pixel rectangle; `(x0, y0)` inclusive, extent `w × h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self { x0, y0, w, h }
    }

    /// Rectangle spanning `[x0, x1) × [y0, y1)`; `None` when empty.
    pub fn from_bounds(x0: usize, y0: usize, x1: usize, y1: usize) -> Option<Self> {
        (x1 > x0 && y1 > y0).then(|| Self::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn x1(&self) -> usize {
        self.x0 + self.w
    }

    pub fn y1(&self) -> usize {
        self.y0 + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1() && y >= self.y0 && y < self.y1()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1() <= self.x1() && other.y1() <= self.y1()
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        Rect::from_bounds(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1().min(other.x1()),
            self.y1().min(other.y1()),
        )
    }

    pub fn union(&self, other: &Rect) -> Rect {
        let x0 = self.x0.min(other.x0);
        let y0 = self.y0.min(other.y0);
        Rect::new(
            x0,
            y0,
            self.x1().max(other.x1()) - x0,
            self.y1().max(other.y1()) - y0,
        )
    }

    /// Grows the rectangle by `margin` on every side, clamped to `bounds`.
    pub fn expand_within(&self, margin: usize, bounds: &Rect) -> Rect {
        let x0 = self.x0.saturating_sub(margin).max(bounds.x0);
        let y0 = self.y0.saturating_sub(margin).max(bounds.y0);
        let x1 = (self.x1() + margin).min(bounds.x1());
        let y1 = (self.y1() + margin).min(bounds.y1());
        Rect::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
    }

    pub fn translate(&self, dx: usize, dy: usize) -> Rect {
        Rect::new(self.x0 + dx, self.y0 + dy, self.w, self.h)
    }
}

/// 8-bit grayscale raster, row-major; 0 is black, 255 white.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "wire::RasterRepr", into = "wire::RasterRepr")]
pub struct Raster {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Raster({}x{})", self.width, self.height)
    }
}

impl Raster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ImagingError::InvalidDimensions {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "raster must be nonempty");
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "raster must be nonempty");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut hist = [0u64; 256];
        for &p in &self.pixels {
            hist[p as usize] += 1;
        }
        hist
    }

    pub fn crop(&self, rect: &Rect) -> Result<Raster, ImagingError> {
        if rect.w == 0 || rect.h == 0 || !self.bounds().contains_rect(rect) {
            return Err(ImagingError::RectOutOfBounds(*rect, self.width, self.height));
        }
        let mut pixels = Vec::with_capacity(rect.area());
        for y in rect.y0..rect.y1() {
            let row = y * self.width;
            pixels.extend_from_slice(&self.pixels[row + rect.x0..row + rect.x1()]);
        }
        Ok(Raster {
            width: rect.w,
            height: rect.h,
            pixels,
        })
    }
}

mod wire {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Serialize};

    use super::{ImagingError, Raster};

    /// JSON shape of a raster: dimensions plus base64 row-major bytes.
    #[derive(Serialize, Deserialize)]
    pub(super) struct RasterRepr {
        width: usize,
        height: usize,
        data: String,
    }

    impl From<Raster> for RasterRepr {
        fn from(r: Raster) -> Self {
            RasterRepr {
                width: r.width,
                height: r.height,
                data: STANDARD.encode(&r.pixels),
            }
        }
    }

    impl TryFrom<RasterRepr> for Raster {
        type Error = String;

        fn try_from(repr: RasterRepr) -> Result<Self, Self::Error> {
            let pixels = STANDARD.decode(repr.data.as_bytes()).map_err(|e| e.to_string())?;
            Raster::new(repr.width, repr.height, pixels).map_err(|e: ImagingError| e.to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_expand_clamps_to_bounds() {
        let bounds = Rect::new(10, 10, 100, 100);
        let r = Rect::new(12, 50, 20, 20).expand_within(16, &bounds);
        assert_eq!(r, Rect::new(10, 34, 38, 52));
    }

    #[test]
    fn rect_intersection_and_union() {
        let a = Rect::new(0, 0, 4, 4);
        let b = Rect::new(2, 3, 4, 4);
        assert_eq!(a.intersect(&b), Some(Rect::new(2, 3, 2, 1)));
        assert_eq!(a.union(&b), Rect::new(0, 0, 6, 7));
        assert_eq!(a.intersect(&Rect::new(4, 0, 1, 1)), None);
    }

    #[test]
    fn raster_rejects_bad_length() {
        assert!(Raster::new(2, 2, vec![0; 3]).is_err());
        assert!(Raster::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn raster_crop_and_json() {
        let r = Raster::from_fn(4, 3, |x, y| (x + 10 * y) as u8);
        let c = r.crop(&Rect::new(1, 1, 2, 2)).unwrap();
        assert_eq!(c.pixels(), &[11, 12, 21, 22]);
        assert!(r.crop(&Rect::new(3, 0, 2, 1)).is_err());
        let json = serde_json::to_string(&r).unwrap();
        let back: Raster = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
