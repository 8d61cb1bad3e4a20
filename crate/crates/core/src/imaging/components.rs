use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{BinaryMask, Rect, RegionMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    pub id: u32,
    pub area: usize,
    pub bbox: Rect,
}

/// Component label image; 0 is background, components are `1..=K`.
#[derive(Debug, Clone)]
pub struct LabeledComponents {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

impl LabeledComponents {
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixels of component `id`, windowed to its bbox.
    pub fn region(&self, id: u32) -> Option<RegionMask> {
        let c = self.components.get((id as usize).checked_sub(1)?)?;
        Some(RegionMask::from_fn(c.bbox, |x, y| self.label(x, y) == id))
    }
}

/// Labels connected foreground regions in first-encounter row-major order.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> LabeledComponents {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = vec![0u32; w * h];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..w * h {
        if !mask.bits()[start] || labels[start] != 0 {
            continue;
        }
        let id = components.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let mut area = 0;
        while let Some(idx) = queue.pop_front() {
            let (x, y) = (idx % w, idx / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for &(dx, dy) in connectivity.offsets() {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if mask.get_signed(nx, ny) {
                    let n = ny as usize * w + nx as usize;
                    if labels[n] == 0 {
                        labels[n] = id;
                        queue.push_back(n);
                    }
                }
            }
        }
        components.push(Component {
            id,
            area,
            bbox: Rect::new(x0, y0, x1 - x0, y1 - y0),
        });
    }

    LabeledComponents {
        width: w,
        height: h,
        labels,
        components,
    }
}
