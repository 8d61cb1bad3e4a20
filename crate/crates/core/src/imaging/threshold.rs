use serde::{Deserialize, Serialize};

use super::{BinaryMask, ImagingError, Raster};

/// Which side of a threshold counts as foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Foreground is `intensity <= t` (chromosomes on a bright field).
    #[default]
    DarkForeground,
    /// Foreground is `intensity > t`, for inverted sources.
    BrightForeground,
}

/// Otsu's threshold over the 256-bin histogram of `image`.
pub fn otsu_threshold(image: &Raster) -> Result<u8, ImagingError> {
    otsu_from_histogram(&image.histogram())
}

/// Returns the lowest `t` in `[0, 254]` maximizing the between-class variance
/// of the split `{<= t} | {> t}`.
pub fn otsu_from_histogram(hist: &[u64; 256]) -> Result<u8, ImagingError> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(ImagingError::DegenerateHistogram);
    }
    let total: u64 = hist.iter().sum();
    let total_sum: u128 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();

    let mut n0: u64 = 0;
    let mut s0: u128 = 0;
    let mut best_t = 0u8;
    let mut best = f64::NEG_INFINITY;
    for t in 0..255usize {
        n0 += hist[t];
        s0 += t as u128 * hist[t] as u128;
        let n1 = total - n0;
        let score = if n0 == 0 || n1 == 0 {
            0.0
        } else {
            // w0 w1 (mu0 - mu1)^2 scaled by N^2: (s0 n1 - s1 n0)^2 / (n0 n1)
            let s1 = total_sum - s0;
            let diff = s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128;
            let d = diff as f64;
            d * d / (n0 as f64 * n1 as f64)
        };
        if score > best {
            best = score;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

pub fn binarize(image: &Raster, threshold: u8, polarity: Polarity) -> BinaryMask {
    let bits = image
        .pixels()
        .iter()
        .map(|&p| match polarity {
            Polarity::DarkForeground => p <= threshold,
            Polarity::BrightForeground => p > threshold,
        })
        .collect();
    BinaryMask::from_bits(image.width(), image.height(), bits).expect("dims match raster")
}
