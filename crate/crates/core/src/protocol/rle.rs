use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::cascade::SemanticMask;
use crate::imaging::{BinaryMask, RegionMask};

/// Row-major run-length encoding of a binary mask. Runs alternate between
/// background and foreground, starting with a (possibly empty) background run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn encode(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in mask.bits() {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Self {
            width: mask.width(),
            height: mask.height(),
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask, ProtocolError> {
        let total = self.width * self.height;
        let mut bits = Vec::with_capacity(total);
        let mut value = false;
        for &c in &self.counts {
            if bits.len() + c as usize > total {
                return Err(ProtocolError::InvalidRle("runs exceed mask size".into()));
            }
            bits.resize(bits.len() + c as usize, value);
            value = !value;
        }
        if bits.len() != total {
            return Err(ProtocolError::InvalidRle(format!(
                "runs cover {} of {} pixels",
                bits.len(),
                total
            )));
        }
        Ok(BinaryMask::from_bits(self.width, self.height, bits).expect("length checked"))
    }

    pub fn foreground_count(&self) -> usize {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as usize).sum()
    }
}

/// Row-major `(class, run_length)` pairs of a semantic mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRuns {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<[u32; 2]>,
}

impl ClassRuns {
    pub fn encode(mask: &SemanticMask) -> Self {
        let mut runs: Vec<[u32; 2]> = Vec::new();
        for &c in mask.classes() {
            match runs.last_mut() {
                Some([class, len]) if *class == c as u32 => *len += 1,
                _ => runs.push([c as u32, 1]),
            }
        }
        Self {
            width: mask.width(),
            height: mask.height(),
            runs,
        }
    }

    pub fn decode(&self) -> Result<SemanticMask, ProtocolError> {
        let total = self.width * self.height;
        let mut classes = Vec::with_capacity(total);
        for &[class, len] in &self.runs {
            if class > SemanticMask::OVERLAP as u32 {
                return Err(ProtocolError::InvalidRle(format!("class {class} out of range")));
            }
            if classes.len() + len as usize > total {
                return Err(ProtocolError::InvalidRle("runs exceed mask size".into()));
            }
            classes.resize(classes.len() + len as usize, class as u8);
        }
        if classes.len() != total {
            return Err(ProtocolError::InvalidRle("runs do not cover the mask".into()));
        }
        Ok(SemanticMask::new(self.width, self.height, classes).expect("validated above"))
    }
}

/// Region mask on the wire: window origin plus the RLE of the window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRle {
    pub origin: (usize, usize),
    pub rle: RleMask,
}

impl RegionRle {
    pub fn encode(region: &RegionMask) -> Self {
        Self {
            origin: region.origin,
            rle: RleMask::encode(&region.mask),
        }
    }

    pub fn decode(&self) -> Result<RegionMask, ProtocolError> {
        Ok(RegionMask::new(self.origin, self.rle.decode()?))
    }
}
