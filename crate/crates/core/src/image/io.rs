use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma};

use super::{GrayImage, Mask, MIN_SIDE};
use crate::error::{Error, Result};

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

fn check_side(path: &Path, w: u32, h: u32) -> Result<()> {
    if (w as usize) < MIN_SIDE || (h as usize) < MIN_SIDE {
        return Err(Error::Dimension(format!(
            "{}: {w}x{h} is smaller than {MIN_SIDE}x{MIN_SIDE}",
            path.display()
        )));
    }
    Ok(())
}

/// Loads an 8- or 16-bit PNG/JPEG, converting color to luma, and maps raw
/// values linearly from `[0, max_raw]` onto `[-1, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let dynamic = decode(path)?;
    check_side(path, dynamic.width(), dynamic.height())?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let pixels: Vec<f64> = match dynamic {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => dynamic
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| 2.0 * f64::from(v) / 255.0 - 1.0)
            .collect(),
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => dynamic
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| 2.0 * f64::from(v) / 65535.0 - 1.0)
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported pixel layout {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    GrayImage::from_clamped(w, h, pixels)
}

/// Loads a mask; any nonzero luma value marks the pixel as masked.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let luma = decode(path)?.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    Mask::new(w, h, luma.into_raw().into_iter().map(|v| v != 0).collect())
}

/// Writes a 16-bit grayscale PNG, mapping `[-1, 1]` linearly onto `[0, 65535]`.
pub fn save_image_png16(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u16> = img
        .pixels()
        .iter()
        .map(|&p| ((p + 1.0) * 0.5 * 65535.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
            .expect("buffer length matches image dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(other.to_string()),
        })
}

/// Writes a mask as an 8-bit PNG, 255 where masked.
pub fn save_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = mask.dims();
    let raw: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer length matches mask");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(other.to_string()),
        })
}

/// PNG and JPEG files directly inside `dir`, sorted by file name.
pub fn list_image_files(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
