use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::error::{ensure, Result};
use crate::seed;

/// Random crop → resize → rotate, as used for encoder training views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Side-length crop ratio range, inside `[0.6, 1.0]`.
    pub crop_ratio: (f64, f64),
    /// Maximum absolute rotation in degrees, at most 15.
    pub max_rotation_deg: f64,
    pub output_width: usize,
    pub output_height: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_ratio: (0.6, 1.0),
            max_rotation_deg: 15.0,
            output_width: 224,
            output_height: 224,
        }
    }
}

impl AugmentConfig {
    /// Crop of the whole frame, no rotation, output at the given size.
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            crop_ratio: (1.0, 1.0),
            max_rotation_deg: 0.0,
            output_width: width,
            output_height: height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_ratio;
        ensure!(
            (0.6..=1.0).contains(&lo) && (0.6..=1.0).contains(&hi) && lo <= hi,
            Parameter,
            "crop ratio range ({lo}, {hi}) must lie inside [0.6, 1.0]"
        );
        ensure!(
            (0.0..=15.0).contains(&self.max_rotation_deg),
            Parameter,
            "rotation limit {} outside [0, 15] degrees",
            self.max_rotation_deg
        );
        ensure!(
            self.output_width >= super::MIN_SIDE && self.output_height >= super::MIN_SIDE,
            Parameter,
            "augment output must be at least {0}x{0}",
            super::MIN_SIDE
        );
        Ok(())
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear sample with edge clamping.
fn sample(src: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
    let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
    lerp(top, bottom, fy)
}

/// Resizes a `w x h` region whose top-left corner is `(ox, oy)` in `src`
/// to `out_w x out_h` with pixel-centre aligned bilinear sampling.
fn resize_region(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    region: (f64, f64, f64, f64),
    out_w: usize,
    out_h: usize,
) -> Vec<f64> {
    let (ox, oy, rw, rh) = region;
    let sx = rw / out_w as f64;
    let sy = rh / out_h as f64;
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let fy = oy + (y as f64 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let fx = ox + (x as f64 + 0.5) * sx - 0.5;
            out.push(sample(src, src_w, src_h, fx, fy));
        }
    }
    out
}

pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage> {
    let (w, h) = img.dims();
    let out = resize_region(
        img.pixels(),
        w,
        h,
        (0.0, 0.0, w as f64, h as f64),
        width,
        height,
    );
    GrayImage::from_clamped(width, height, out)
}

fn rotate(src: &[f64], w: usize, h: usize, degrees: f64) -> Vec<f64> {
    if degrees == 0.0 {
        return src.to_vec();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            // inverse mapping: rotate the output coordinate back into the source
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            out.push(sample(src, w, h, sx, sy));
        }
    }
    out
}

/// Deterministic augmentation: crop at a random side ratio and position,
/// resize to the configured output, rotate by a uniform angle.
pub fn augment(img: &GrayImage, seed: u64, config: &AugmentConfig) -> Result<GrayImage> {
    config.validate()?;
    let mut rng = seed::rng(seed, &[seed::tag("augment")]);
    let (w, h) = img.dims();
    let (lo, hi) = config.crop_ratio;
    let ratio = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let cw = (ratio * w as f64).round();
    let ch = (ratio * h as f64).round();
    ensure!(
        cw >= 1.0 && ch >= 1.0,
        Parameter,
        "crop window {cw}x{ch} is degenerate"
    );
    let max_x = w as f64 - cw;
    let max_y = h as f64 - ch;
    let ox = if max_x > 0.0 {
        rng.gen_range(0..=max_x as usize) as f64
    } else {
        0.0
    };
    let oy = if max_y > 0.0 {
        rng.gen_range(0..=max_y as usize) as f64
    } else {
        0.0
    };
    let (out_w, out_h) = (config.output_width, config.output_height);
    let resized = resize_region(img.pixels(), w, h, (ox, oy, cw, ch), out_w, out_h);
    let angle = if config.max_rotation_deg > 0.0 {
        rng.gen_range(-config.max_rotation_deg..=config.max_rotation_deg)
    } else {
        0.0
    };
    let rotated = rotate(&resized, out_w, out_h, angle);
    GrayImage::from_clamped(out_w, out_h, rotated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn textured(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| ((x * 7 + y * 13) % 17) as f64 / 8.0 - 1.0).unwrap()
    }

    #[test]
    fn identity_config_returns_input() {
        let img = textured(20, 14);
        let out = augment(&img, 99, &AugmentConfig::identity(20, 14)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let img = textured(40, 40);
        let cfg = AugmentConfig {
            output_width: 32,
            output_height: 32,
            ..AugmentConfig::default()
        };
        let a = augment(&img, 5, &cfg).unwrap();
        let b = augment(&img, 5, &cfg).unwrap();
        let c = augment(&img, 6, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn constant_field_stays_constant() {
        let img = GrayImage::constant(30, 30, 0.375).unwrap();
        for seed in 0..10 {
            let out = augment(&img, seed, &AugmentConfig::default()).unwrap();
            assert_eq!(out.dims(), (224, 224));
            assert!(out.pixels().iter().all(|&p| p == 0.375));
        }
    }

    #[test]
    fn config_bounds_enforced() {
        let img = textured(16, 16);
        let bad_crop = AugmentConfig {
            crop_ratio: (0.5, 1.0),
            ..AugmentConfig::default()
        };
        assert!(matches!(augment(&img, 0, &bad_crop), Err(Error::Parameter(_))));
        let bad_rot = AugmentConfig {
            max_rotation_deg: 20.0,
            ..AugmentConfig::default()
        };
        assert!(matches!(augment(&img, 0, &bad_rot), Err(Error::Parameter(_))));
    }

    #[test]
    fn resize_preserves_linear_ramp_in_interior() {
        let img = GrayImage::from_fn(16, 16, |x, _| x as f64 / 16.0 - 0.5).unwrap();
        let up = resize_bilinear(&img, 32, 32).unwrap();
        // interior output samples land halfway between source centres
        let v = up.get(9, 3);
        let src_x = (9.0 + 0.5) * 0.5 - 0.5;
        assert!((v - (src_x / 16.0 - 0.5)).abs() < 1e-12);
    }
}
