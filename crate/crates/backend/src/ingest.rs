use image::ImageFormat;
use kayra_core::imaging::Raster;

use crate::Error;

/// Decodes TIFF, PNG or BMP bytes into 8-bit luminance.
pub fn decode_grayscale(bytes: &[u8]) -> Result<Raster, Error> {
    let format = image::guess_format(bytes).map_err(|_| Error::UnsupportedFormat)?;
    if !matches!(format, ImageFormat::Tiff | ImageFormat::Png | ImageFormat::Bmp) {
        return Err(Error::UnsupportedFormat);
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| Error::CorruptImage(e.to_string()))?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::CorruptImage("image has no pixels".into()));
    }
    Raster::new(w as usize, h as usize, luma.into_raw()).map_err(|e| Error::CorruptImage(e.to_string()))
}

/// Encodes a raster as an 8-bit grayscale PNG.
pub fn encode_png(raster: &Raster) -> Vec<u8> {
    let img = image::GrayImage::from_raw(raster.width() as u32, raster.height() as u32, raster.pixels().to_vec())
        .expect("raster dims match its buffer");
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(raster: &Raster, format: ImageFormat) -> Vec<u8> {
        let img = image::GrayImage::from_raw(raster.width() as u32, raster.height() as u32, raster.pixels().to_vec()).unwrap();
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, format).unwrap();
        out.into_inner()
    }

    #[test]
    fn grayscale_formats_round_trip() {
        let r = Raster::from_fn(17, 9, |x, y| (x * 13 + y * 7) as u8);
        for f in [ImageFormat::Tiff, ImageFormat::Png, ImageFormat::Bmp] {
            assert_eq!(decode_grayscale(&encode(&r, f)).unwrap(), r, "{f:?}");
        }
        assert_eq!(decode_grayscale(&encode_png(&r)).unwrap(), r);
    }

    #[test]
    fn colour_becomes_luminance() {
        let rgb = image::RgbImage::from_fn(2, 1, |x, _| if x == 0 { image::Rgb([255, 255, 255]) } else { image::Rgb([0, 0, 0]) });
        let mut out = std::io::Cursor::new(Vec::new());
        rgb.write_to(&mut out, ImageFormat::Png).unwrap();
        let r = decode_grayscale(out.get_ref()).unwrap();
        assert_eq!(r.pixels(), &[255, 0]);
    }

    #[test]
    fn text_and_truncated_input() {
        assert!(matches!(decode_grayscale(b"hello, world"), Err(Error::UnsupportedFormat)));
        let png = encode_png(&Raster::filled(20, 20, 3));
        assert!(matches!(decode_grayscale(&png[..40]), Err(Error::CorruptImage(_))));
    }
}
