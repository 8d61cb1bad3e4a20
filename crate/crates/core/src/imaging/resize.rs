use super::{ImagingError, Raster};

/// Output extent of one axis under scale `s`: `round(len * s)`, at least 1.
pub fn scaled_dim(len: usize, s: f64) -> usize {
    ((len as f64 * s).round() as usize).max(1)
}

/// Scale for the min-side/cap rule. Frames whose long side exceeds `max_dim`
/// are brought down to exactly `max_dim` on that side. Otherwise the short
/// side goes to `min_dim`, falling back to `max_dim / max(w, h)` when that
/// would push the long side past the cap.
pub fn constrained_scale(width: usize, height: usize, min_dim: usize, max_dim: usize) -> f64 {
    assert!(min_dim <= max_dim, "min_dim must not exceed max_dim");
    let short = width.min(height) as f64;
    let long = width.max(height) as f64;
    if long > max_dim as f64 {
        return max_dim as f64 / long;
    }
    let s = min_dim as f64 / short;
    if (long * s).round() > max_dim as f64 {
        max_dim as f64 / long
    } else {
        s
    }
}

/// Resizes under the min-side/cap rule and returns the applied scale.
pub fn resize_constrained(image: &Raster, min_dim: usize, max_dim: usize) -> (Raster, f64) {
    let s = constrained_scale(image.width(), image.height(), min_dim, max_dim);
    (resize_by_scale(image, s), s)
}

/// Bilinear resampling by a uniform scale factor.
///
/// Destination pixel centre `d + 0.5` samples source position
/// `(d + 0.5) / s - 0.5`, clamped to the source extent.
pub fn resize_by_scale(image: &Raster, s: f64) -> Raster {
    let (w, h) = image.dims();
    let (ow, oh) = (scaled_dim(w, s), scaled_dim(h, s));
    let xs: Vec<(usize, usize, f64)> = (0..ow).map(|d| sample_axis(d, s, w)).collect();
    let ys: Vec<(usize, usize, f64)> = (0..oh).map(|d| sample_axis(d, s, h)).collect();
    let mut pixels = Vec::with_capacity(ow * oh);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = image.get(x0, y0) as f64 * (1.0 - fx) + image.get(x1, y0) as f64 * fx;
            let bottom = image.get(x0, y1) as f64 * (1.0 - fx) + image.get(x1, y1) as f64 * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Raster::new(ow, oh, pixels).expect("dims computed above")
}

fn sample_axis(d: usize, s: f64, len: usize) -> (usize, usize, f64) {
    let pos = ((d as f64 + 0.5) / s - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Pads to `target_w × target_h` with the source at offset (0, 0), replicating
/// the last column and last row into the padding.
pub fn pad_edge_replicate(
    image: &Raster,
    target_w: usize,
    target_h: usize,
) -> Result<Raster, ImagingError> {
    let (w, h) = image.dims();
    if target_w < w || target_h < h {
        return Err(ImagingError::TargetSmallerThanSource {
            source_w: w,
            source_h: h,
            target_w,
            target_h,
        });
    }
    Ok(Raster::from_fn(target_w, target_h, |x, y| {
        image.get(x.min(w - 1), y.min(h - 1))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scale_rule_examples() {
        let s = constrained_scale(1830, 1830, 512, 992);
        assert_eq!(s, 992.0 / 1830.0);
        assert_eq!((scaled_dim(1830, s), scaled_dim(1830, s)), (992, 992));

        let s = constrained_scale(600, 900, 512, 992);
        assert_eq!(s, 512.0 / 600.0);
        assert_eq!((scaled_dim(600, s), scaled_dim(900, s)), (512, 768));

        let s = constrained_scale(400, 1000, 512, 992);
        assert_eq!(s, 992.0 / 1000.0);
        assert_eq!((scaled_dim(400, s), scaled_dim(1000, s)), (397, 992));

        let s = constrained_scale(1349, 1510, 512, 992);
        assert_eq!(s, 992.0 / 1510.0);
        assert_eq!((scaled_dim(1349, s), scaled_dim(1510, s)), (886, 992));

        let s = constrained_scale(992, 992, 512, 992);
        assert_eq!(s, 512.0 / 992.0);
        assert_eq!(scaled_dim(992, s), 512);
    }

    #[test]
    fn resize_returns_applied_scale_and_dims() {
        let img = Raster::from_fn(600, 900, |x, y| ((x + y) % 256) as u8);
        let (out, s) = resize_constrained(&img, 512, 992);
        assert_eq!(s, 512.0 / 600.0);
        assert_eq!(out.dims(), (512, 768));
    }

    #[test]
    fn identity_scale_is_lossless() {
        let img = Raster::from_fn(17, 9, |x, y| (x * 13 + y * 7) as u8);
        assert_eq!(resize_by_scale(&img, 1.0), img);
    }

    #[test]
    fn pad_examples() {
        let img = Raster::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let p = pad_edge_replicate(&img, 3, 3).unwrap();
        assert_eq!(p.pixels(), &[1, 2, 2, 3, 4, 4, 3, 4, 4]);
        assert_eq!(pad_edge_replicate(&img, 2, 2).unwrap(), img);
        assert!(matches!(
            pad_edge_replicate(&img, 1, 3),
            Err(ImagingError::TargetSmallerThanSource { .. })
        ));
    }

    #[test]
    fn pad_512x768_to_992() {
        let img = Raster::from_fn(512, 768, |x, y| ((x * 3 + y) % 251) as u8);
        let p = pad_edge_replicate(&img, 992, 992).unwrap();
        for y in 768..992 {
            for x in 0..512 {
                assert_eq!(p.get(x, y), img.get(x, 767));
            }
        }
        for y in 0..992 {
            for x in 512..992 {
                assert_eq!(p.get(x, y), img.get(511, y.min(767)));
            }
        }
    }

    proptest! {
        #[test]
        fn constrained_output_respects_limits(w in 1usize..4000, h in 1usize..4000) {
            let s = constrained_scale(w, h, 512, 992);
            let (ow, oh) = (scaled_dim(w, s), scaled_dim(h, s));
            prop_assert!(ow <= 992 && oh <= 992);
            if w.max(h) > 992 {
                prop_assert_eq!(ow.max(oh), 992);
            } else if s == 512.0 / w.min(h) as f64 {
                let short = ow.min(oh) as i64;
                prop_assert!((short - 512).abs() <= 1);
            }
        }

        #[test]
        fn padding_preserves_source(w in 1usize..20, h in 1usize..20, tw in 0usize..10, th in 0usize..10, seed in any::<u8>()) {
            let img = Raster::from_fn(w, h, |x, y| (x as u8).wrapping_mul(31).wrapping_add(y as u8).wrapping_add(seed));
            let p = pad_edge_replicate(&img, w + tw, h + th).unwrap();
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(p.get(x, y), img.get(x, y));
                }
            }
        }
    }
}
