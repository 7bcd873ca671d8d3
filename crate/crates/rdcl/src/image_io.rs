//! Image loading/saving and padding.

use std::path::Path;

use image::ImageReader;
use ndarray::Array3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot read image {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("cannot write image {path}: {reason}")]
    Write { path: String, reason: String },
}

/// Load a PNG or PPM file as `[3,H,W]` floats in [0,1].
pub fn load_image(path: &Path) -> Result<Array3<f32>, ImageIoError> {
    let reader = ImageReader::open(path)
        .map_err(|e| ImageIoError::Read { path: path.display().to_string(), reason: e.to_string() })?
        .with_guessed_format()
        .map_err(|e| ImageIoError::Read { path: path.display().to_string(), reason: e.to_string() })?;
    let img = reader
        .decode()
        .map_err(|e| ImageIoError::Read { path: path.display().to_string(), reason: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Save `[3,H,W]` floats in [0,1] as an 8-bit RGB PNG.
pub fn save_image_png(path: &Path, img: &Array3<f32>) -> Result<(), ImageIoError> {
    let buf = to_rgb8(img);
    let (_, h, w) = img.dim();
    image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches dims")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ImageIoError::Write { path: path.display().to_string(), reason: e.to_string() })
}

/// Quantize to the 8-bit buffer that would be written to disk (row-major RGB).
pub fn to_rgb8(img: &Array3<f32>) -> Vec<u8> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3);
    let mut buf = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = (img[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                buf[(y * w + x) * 3 + ch] = v;
            }
        }
    }
    buf
}

/// Edge-replication padding up to multiples of `multiple` on both dims.
/// Returns the padded image; the caller records the true dims.
pub fn pad_replicate(img: &Array3<f32>, multiple: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return img.clone();
    }
    let mut out = Array3::<f32>::zeros((c, ph, pw));
    for ci in 0..c {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                let sx = x.min(w - 1);
                out[[ci, y, x]] = img[[ci, sy, sx]];
            }
        }
    }
    out
}

/// Top-left crop back to true dims.
pub fn crop(img: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    img.slice(ndarray::s![.., 0..h, 0..w]).to_owned()
}
