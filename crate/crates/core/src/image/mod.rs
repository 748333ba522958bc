//! Single-channel image container, histograms, I/O and augmentation.
//!
//! Pixels are stored row-major as `f64` in `[-1, 1]`.

mod augment;
mod inpaint;
mod io;

pub use augment::{augment, resize_bilinear, AugmentConfig};
pub use inpaint::{fill_masked, inpaint_mask, Mask};
pub use io::{list_image_files, load_image, load_mask, save_image_png16, save_mask_png};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Smallest admissible side length of a [`GrayImage`].
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        ensure!(
            width >= MIN_SIDE && height >= MIN_SIDE,
            Dimension,
            "image is {width}x{height}, minimum is {MIN_SIDE}x{MIN_SIDE}"
        );
        ensure!(
            pixels.len() == width * height,
            Dimension,
            "{} pixels supplied for a {width}x{height} image",
            pixels.len()
        );
        if let Some(bad) = pixels.iter().find(|p| !(-1.0..=1.0).contains(*p)) {
            return Err(Error::Parameter(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image clamping every value into `[-1, 1]`; NaN maps to 0.
    pub fn from_clamped(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        let pixels = pixels
            .into_iter()
            .map(|p| if p.is_nan() { 0.0 } else { p.clamp(-1.0, 1.0) })
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::from_clamped(width, height, pixels)
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

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var =
            self.pixels.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / self.pixels.len() as f64;
        var.sqrt()
    }
}

/// A stack of equally sized single-channel planes, `B x 1 x H x W`.
///
/// Unlike [`GrayImage`] a batch carries no range or minimum-size constraint,
/// since it also holds enhanced outputs and transformation matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    count: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBatch {
    pub fn new(count: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(count >= 1, Dimension, "batch must hold at least one image");
        ensure!(
            width >= 1 && height >= 1,
            Dimension,
            "batch planes must be non-empty"
        );
        ensure!(
            data.len() == count * width * height,
            Dimension,
            "batch of {count} {width}x{height} planes needs {} values, got {}",
            count * width * height,
            data.len()
        );
        Ok(Self {
            count,
            width,
            height,
            data,
        })
    }

    /// Stacks images that must all share the same dimensions.
    pub fn from_images(images: &[GrayImage]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Dimension("batch must hold at least one image".into()))?;
        let (w, h) = first.dims();
        let mut data = Vec::with_capacity(images.len() * w * h);
        for img in images {
            ensure!(
                img.dims() == (w, h),
                Dimension,
                "batch members differ in size: {}x{} vs {w}x{h}",
                img.width(),
                img.height()
            );
            data.extend_from_slice(img.pixels());
        }
        Self::new(images.len(), w, h, data)
    }

    pub fn single(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(1, width, height, data)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, i: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn planes(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.plane_len())
    }

    pub fn same_shape(&self, other: &ImageBatch) -> bool {
        self.count == other.count && self.width == other.width && self.height == other.height
    }
}

/// Fixed-width histogram over `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        ensure!(bins >= 2, Parameter, "histogram needs at least 2 bins, got {bins}");
        let mut counts = vec![0u64; bins];
        for &v in values {
            counts[bin_index(v, bins)] += 1;
        }
        let bin_edges = (0..=bins)
            .map(|i| -1.0 + 2.0 * i as f64 / bins as f64)
            .collect();
        Ok(Self { bin_edges, counts })
    }

    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Shannon entropy in nats of the normalized bin frequencies.
    pub fn entropy(&self) -> Result<f64> {
        let total = self.total();
        ensure!(total > 0, Parameter, "entropy of an empty histogram");
        let total = total as f64;
        Ok(self
            .counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.ln()
            })
            .sum())
    }
}

#[inline]
fn bin_index(v: f64, bins: usize) -> usize {
    let t = ((v + 1.0) * 0.5 * bins as f64).floor();
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

pub fn histogram(img: &GrayImage, bins: usize) -> Result<Histogram> {
    Histogram::from_values(img.pixels(), bins)
}

pub fn histogram_entropy(h: &Histogram) -> Result<f64> {
    h.entropy()
}
