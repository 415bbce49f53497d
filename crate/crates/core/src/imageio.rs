//! PNG encoding and decoding of 16x16 RGB observations.

use std::io::Cursor;

use image::{imageops::FilterType, ImageFormat, RgbImage};

use crate::data::{CHANNELS, IMAGE_SIDE, PIXELS};
use crate::error::{Error, Result};

/// Largest accepted input image, in pixels per side.
pub const MAX_SIDE: u32 = 1024;

/// Encodes HWC pixels in `[0, 1]` as an RGB PNG; values are rounded to 8 bits.
pub fn encode_png(pixels: &[f64]) -> Result<Vec<u8>> {
    if pixels.len() != PIXELS {
        return Err(Error::Shape(format!("expected {PIXELS} pixel values, got {}", pixels.len())));
    }
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image pixels".into()));
    }
    let raw = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(IMAGE_SIDE as u32, IMAGE_SIDE as u32, raw).expect("buffer size matches");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// HWC values in `[0, 1]`.
    pub pixels: Vec<f64>,
    /// Whether the input had to be resized to 16x16.
    pub resized: bool,
}

/// Decodes a PNG into 16x16 RGB, resizing other sizes with a triangle filter.
pub fn decode_png(bytes: &[u8]) -> Result<Decoded> {
    let reader = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let (w, h) = reader.into_dimensions().map_err(|e| Error::Image(e.to_string()))?;
    if w > MAX_SIDE || h > MAX_SIDE {
        return Err(Error::ImageTooLarge { width: w, height: h, max: MAX_SIDE });
    }
    if w == 0 || h == 0 {
        return Err(Error::Image("image has no pixels".into()));
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_rgb8();
    let side = IMAGE_SIDE as u32;
    let resized = img.width() != side || img.height() != side;
    let img = if resized { image::imageops::resize(&img, side, side, FilterType::Triangle) } else { img };
    let pixels = img.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect::<Vec<_>>();
    debug_assert_eq!(pixels.len(), IMAGE_SIDE * IMAGE_SIDE * CHANNELS);
    Ok(Decoded { pixels, resized })
}
