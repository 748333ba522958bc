//! Pixel-wise tanh enhancement curve and its application under a per-pixel
//! sensitivity map.
//!
//! The curve is `y = y_shift + tanh(alpha * (x + x_shift))`. With both shifts
//! at zero it is odd, strictly increasing, and maps `[-1, 1]` into `(-1, 1)`;
//! larger `alpha` steepens the mid-range and widens the output dynamic range.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{GrayImage, ImageBatch};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveShift {
    pub x_shift: f64,
    pub y_shift: f64,
}

impl CurveShift {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.x_shift.is_finite() && self.y_shift.is_finite(),
            Parameter,
            "curve shifts must be finite"
        );
        Ok(())
    }
}

/// Per-pixel positive sensitivity map, same shape as the image it enhances.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformMatrix {
    width: usize,
    height: usize,
    alphas: Vec<f64>,
}

impl TransformMatrix {
    pub fn new(width: usize, height: usize, alphas: Vec<f64>) -> Result<Self> {
        ensure!(
            alphas.len() == width * height,
            Dimension,
            "{} alphas for a {width}x{height} matrix",
            alphas.len()
        );
        if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::Parameter(format!(
                "alpha {a} is not strictly positive and finite"
            )));
        }
        Ok(Self {
            width,
            height,
            alphas,
        })
    }

    pub fn constant(width: usize, height: usize, alpha: f64) -> Result<Self> {
        Self::new(width, height, vec![alpha; width * height])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn into_alphas(self) -> Vec<f64> {
        self.alphas
    }
}

#[inline]
pub(crate) fn curve_unchecked(x: f64, alpha: f64, shift: CurveShift) -> f64 {
    shift.y_shift + (alpha * (x + shift.x_shift)).tanh()
}

pub fn le_curve(x: f64, alpha: f64, shift: CurveShift) -> Result<f64> {
    ensure!(
        alpha > 0.0 && alpha.is_finite(),
        Parameter,
        "alpha must be positive, got {alpha}"
    );
    Ok(curve_unchecked(x, alpha, shift))
}

/// Derivative of the curve with respect to its input pixel.
pub fn le_curve_slope(x: f64, alpha: f64, shift: CurveShift) -> f64 {
    let t = (alpha * (x + shift.x_shift)).tanh();
    alpha * (1.0 - t * t)
}

/// Applies the curve pixel-wise, returning the raw enhanced plane.
///
/// Non-zero shifts can push values outside `[-1, 1]`; use
/// [`apply_transform`] for a clamped [`GrayImage`].
pub fn apply_transform_raw(img: &[f64], alphas: &[f64], shift: CurveShift) -> Vec<f64> {
    img.iter()
        .zip(alphas)
        .map(|(&x, &a)| curve_unchecked(x, a, shift))
        .collect()
}

pub fn apply_transform(
    img: &GrayImage,
    matrix: &TransformMatrix,
    shift: CurveShift,
) -> Result<GrayImage> {
    if img.dims() != matrix.dims() {
        return Err(Error::Dimension(format!(
            "image {}x{} vs transform matrix {}x{}",
            img.width(),
            img.height(),
            matrix.width,
            matrix.height
        )));
    }
    shift.validate()?;
    let out = apply_transform_raw(img.pixels(), matrix.alphas(), shift);
    GrayImage::from_clamped(img.width(), img.height(), out)
}

/// Batched application for training; `alphas` shares the batch layout.
pub fn apply_transform_batch(
    images: &ImageBatch,
    alphas: &ImageBatch,
    shift: CurveShift,
) -> Result<ImageBatch> {
    ensure!(
        images.same_shape(alphas),
        Dimension,
        "image batch and alpha batch differ in shape"
    );
    let data = apply_transform_raw(images.data(), alphas.data(), shift);
    ImageBatch::new(images.count(), images.width(), images.height(), data)
}

/// Gradient of `y = curve(x; alpha)` with respect to `alpha`.
#[inline]
pub(crate) fn d_curve_d_alpha(x: f64, y_minus_shift: f64, shift: CurveShift) -> f64 {
    (1.0 - y_minus_shift * y_minus_shift) * (x + shift.x_shift)
}
