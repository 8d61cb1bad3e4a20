use serde::{Deserialize, Serialize};

use super::{ImagingError, Rect};

/// Row-major boolean mask; `true` is foreground.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, ImagingError> {
        if bits.len() != width * height {
            return Err(ImagingError::InvalidDimensions {
                width,
                height,
                len: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Like [`get`](Self::get) but `false` outside the frame.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding rectangle of the set pixels.
    pub fn tight_bbox(&self) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            let row = &self.bits[y * self.width..(y + 1) * self.width];
            if let Some(first) = row.iter().position(|&b| b) {
                let last = row.iter().rposition(|&b| b).unwrap();
                x0 = x0.min(first);
                x1 = x1.max(last + 1);
                y0 = y0.min(y);
                y1 = y + 1;
            }
        }
        Rect::from_bounds(x0, y0, x1, y1)
    }

    pub fn crop(&self, rect: &Rect) -> BinaryMask {
        BinaryMask::from_fn(rect.w, rect.h, |x, y| self.get(rect.x0 + x, rect.y0 + y))
    }
}

/// |a ∩ b| / |a ∪ b|, defined as 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, ImagingError> {
    if a.width != b.width || a.height != b.height {
        return Err(ImagingError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// A mask stored only over its own window of a larger frame.
///
/// `origin` is the frame position of the window's top-left pixel. Instance
/// masks are kept in this form so that dozens of chromosomes on a
/// 1830×1830 frame do not each cost a full-frame bitmap.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct RegionMask {
    pub origin: (usize, usize),
    pub mask: BinaryMask,
}

impl RegionMask {
    pub fn new(origin: (usize, usize), mask: BinaryMask) -> Self {
        Self { origin, mask }
    }

    /// Region from a full-frame mask, trimmed to its tight bbox.
    pub fn from_full(mask: &BinaryMask) -> Option<Self> {
        let bbox = mask.tight_bbox()?;
        Some(Self::new((bbox.x0, bbox.y0), mask.crop(&bbox)))
    }

    /// Builds a region over `window` with `f` evaluated in frame coordinates.
    pub fn from_fn(window: Rect, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mask = BinaryMask::from_fn(window.w, window.h, |x, y| f(window.x0 + x, window.y0 + y));
        Self::new((window.x0, window.y0), mask)
    }

    pub fn window(&self) -> Rect {
        Rect::new(self.origin.0, self.origin.1, self.mask.width(), self.mask.height())
    }

    pub fn area(&self) -> usize {
        self.mask.count()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Membership test in frame coordinates.
    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.origin.0
            && y >= self.origin.1
            && x - self.origin.0 < self.mask.width()
            && y - self.origin.1 < self.mask.height()
            && self.mask.get(x - self.origin.0, y - self.origin.1)
    }

    /// Tight bbox of the set pixels in frame coordinates.
    pub fn bbox(&self) -> Option<Rect> {
        self.mask
            .tight_bbox()
            .map(|r| r.translate(self.origin.0, self.origin.1))
    }

    /// Copy cropped to the tight bbox; `None` when empty.
    pub fn trimmed(&self) -> Option<RegionMask> {
        let local = self.mask.tight_bbox()?;
        Some(RegionMask::new(
            (self.origin.0 + local.x0, self.origin.1 + local.y0),
            self.mask.crop(&local),
        ))
    }

    /// Iterates set pixels in frame coordinates, row-major.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.mask.width();
        let (ox, oy) = self.origin;
        self.mask
            .bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (ox + i % w, oy + i / w))
    }

    pub fn intersection_count(&self, other: &RegionMask) -> usize {
        let Some(overlap) = self.window().intersect(&other.window()) else {
            return 0;
        };
        let mut n = 0;
        for y in overlap.y0..overlap.y1() {
            for x in overlap.x0..overlap.x1() {
                n += (self.contains(x, y) && other.contains(x, y)) as usize;
            }
        }
        n
    }

    /// Mask IoU; 0 when both are empty.
    pub fn iou(&self, other: &RegionMask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn union(&self, other: &RegionMask) -> RegionMask {
        let window = self.window().union(&other.window());
        RegionMask::from_fn(window, |x, y| self.contains(x, y) || other.contains(x, y))
    }

    /// Keeps only pixels for which `keep` holds (frame coordinates).
    pub fn retain(&self, mut keep: impl FnMut(usize, usize) -> bool) -> RegionMask {
        RegionMask::from_fn(self.window(), |x, y| self.contains(x, y) && keep(x, y))
    }

    /// Pixel-centre centroid in frame coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (x, y) in self.pixels() {
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Rebases the region into a frame whose origin sits at `(dx, dy)` of the
    /// current frame, dropping pixels that fall outside `frame_w × frame_h`.
    pub fn reframe(&self, dx: usize, dy: usize, frame_w: usize, frame_h: usize) -> Option<RegionMask> {
        let target = Rect::new(dx, dy, frame_w, frame_h);
        let inside = self.window().intersect(&target)?;
        let local = Rect::new(inside.x0 - dx, inside.y0 - dy, inside.w, inside.h);
        RegionMask::from_fn(local, |x, y| self.contains(x + dx, y + dy)).trimmed()
    }

    /// Translates the region by a non-negative offset.
    pub fn shifted(&self, dx: usize, dy: usize) -> RegionMask {
        RegionMask::new((self.origin.0 + dx, self.origin.1 + dy), self.mask.clone())
    }

    pub fn to_full(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| self.contains(x, y))
    }
}
