use super::GrayImage;
use crate::error::{ensure, Error, Result};

const FILL_TOLERANCE: f64 = 1e-4;
const MAX_SWEEPS: usize = 100_000;

/// Binary pixel mask; `true` marks a pixel to be replaced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        ensure!(
            bits.len() == width * height,
            Dimension,
            "mask has {} entries for {width}x{height}",
            bits.len()
        );
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..width * height).map(|i| f(i % width, i / width)).collect();
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Replaces masked entries of a row-major plane by the fixed point of the
/// 4-neighbour mean, sweeping in place until the largest update is below
/// `1e-4`. Unmasked entries are never written.
pub fn fill_masked(width: usize, height: usize, values: &mut [f64], mask: &[bool]) -> Result<()> {
    ensure!(
        values.len() == width * height && mask.len() == values.len(),
        Dimension,
        "plane and mask sizes differ"
    );
    let known: Vec<f64> = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&v, _)| v)
        .collect();
    ensure!(!known.is_empty(), Parameter, "mask covers the entire image");
    let masked: Vec<usize> = (0..values.len()).filter(|&i| mask[i]).collect();
    if masked.is_empty() {
        return Ok(());
    }
    let seed = known.iter().sum::<f64>() / known.len() as f64;
    for &i in &masked {
        values[i] = seed;
    }
    for _ in 0..MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for &i in &masked {
            let (x, y) = (i % width, i / width);
            let mut sum = 0.0;
            let mut n = 0u32;
            if x > 0 {
                sum += values[i - 1];
                n += 1;
            }
            if x + 1 < width {
                sum += values[i + 1];
                n += 1;
            }
            if y > 0 {
                sum += values[i - width];
                n += 1;
            }
            if y + 1 < height {
                sum += values[i + width];
                n += 1;
            }
            if n == 0 {
                continue;
            }
            let next = sum / f64::from(n);
            max_change = max_change.max((next - values[i]).abs());
            values[i] = next;
        }
        if max_change < FILL_TOLERANCE {
            return Ok(());
        }
    }
    log::warn!("mask fill stopped after {MAX_SWEEPS} sweeps without converging");
    Ok(())
}

pub fn inpaint_mask(img: &GrayImage, mask: &Mask) -> Result<GrayImage> {
    if mask.dims() != img.dims() {
        return Err(Error::Dimension(format!(
            "mask is {}x{}, image is {}x{}",
            mask.width,
            mask.height,
            img.width(),
            img.height()
        )));
    }
    let mut values = img.pixels().to_vec();
    fill_masked(img.width(), img.height(), &mut values, &mask.bits)?;
    GrayImage::new(img.width(), img.height(), values)
}
