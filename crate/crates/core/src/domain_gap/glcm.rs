use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::GrayImage;

pub const DEFAULT_LEVELS: usize = 32;
pub const DEFAULT_DISTANCE: usize = 1;

/// Co-occurrence direction; offsets are `(dx, dy)` with `y` growing downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    D0,
    D45,
    D90,
    D135,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::D0, Direction::D45, Direction::D90, Direction::D135];

    pub fn degrees(self) -> u32 {
        match self {
            Direction::D0 => 0,
            Direction::D45 => 45,
            Direction::D90 => 90,
            Direction::D135 => 135,
        }
    }

    pub fn offset(self, distance: usize) -> (isize, isize) {
        let d = distance as isize;
        match self {
            Direction::D0 => (d, 0),
            Direction::D45 => (d, -d),
            Direction::D90 => (0, -d),
            Direction::D135 => (-d, -d),
        }
    }
}

/// Normalized symmetric co-occurrence matrix, row-major `levels x levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Glcm {
    pub levels: usize,
    pub p: Vec<f64>,
}

impl Glcm {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.levels + j]
    }
}

/// Uniform quantization of `[-1, 1]` into `levels` bins.
pub fn quantize(v: f64, levels: usize) -> usize {
    let t = ((v + 1.0) * 0.5 * levels as f64).floor();
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(levels - 1)
    }
}

/// Co-occurrences of an already quantized grid, both orderings counted.
pub fn glcm_from_levels(
    q: &[usize],
    width: usize,
    height: usize,
    levels: usize,
    direction: Direction,
    distance: usize,
) -> Result<Glcm> {
    ensure!(levels >= 2, Parameter, "GLCM needs at least 2 levels, got {levels}");
    ensure!(distance >= 1, Parameter, "GLCM distance must be at least 1");
    ensure!(q.len() == width * height, Dimension, "level grid does not match {width}x{height}");
    ensure!(q.iter().all(|&v| v < levels), Parameter, "grid value outside {levels} levels");
    let (dx, dy) = direction.offset(distance);
    ensure!(
        dx.unsigned_abs() < width && dy.unsigned_abs() < height,
        Dimension,
        "{width}x{height} image is smaller than offset ({dx}, {dy})"
    );
    let mut counts = vec![0u64; levels * levels];
    for y in 0..height {
        let ny = y as isize + dy;
        if ny < 0 || ny >= height as isize {
            continue;
        }
        for x in 0..width {
            let nx = x as isize + dx;
            if nx < 0 || nx >= width as isize {
                continue;
            }
            let a = q[y * width + x];
            let b = q[ny as usize * width + nx as usize];
            counts[a * levels + b] += 1;
            counts[b * levels + a] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    Ok(Glcm {
        levels,
        p: counts.iter().map(|&c| c as f64 / total as f64).collect(),
    })
}

pub fn glcm(img: &GrayImage, levels: usize, direction: Direction, distance: usize) -> Result<Glcm> {
    ensure!(levels >= 2, Parameter, "GLCM needs at least 2 levels, got {levels}");
    let q: Vec<usize> = img.pixels().iter().map(|&v| quantize(v, levels)).collect();
    glcm_from_levels(&q, img.width(), img.height(), levels, direction, distance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlcmFeatures {
    pub asm: f64,
    pub homogeneity: f64,
    pub contrast: f64,
    /// 0 when a marginal has zero variance, with `degenerate` set.
    pub correlation: f64,
    pub degenerate: bool,
}

pub fn glcm_features(g: &Glcm) -> GlcmFeatures {
    let n = g.levels;
    let (mut asm, mut homogeneity, mut contrast, mut mu_i, mut mu_j) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let p = g.at(i, j);
            let d = i.abs_diff(j) as f64;
            asm += p * p;
            homogeneity += p / (1.0 + d);
            contrast += p * d * d;
            mu_i += i as f64 * p;
            mu_j += j as f64 * p;
        }
    }
    let (mut var_i, mut var_j, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let p = g.at(i, j);
            let (a, b) = (i as f64 - mu_i, j as f64 - mu_j);
            var_i += a * a * p;
            var_j += b * b * p;
            cov += a * b * p;
        }
    }
    let denom = (var_i * var_j).sqrt();
    let degenerate = denom <= 1e-12;
    let correlation = if degenerate {
        0.0
    } else {
        (cov / denom).clamp(-1.0, 1.0)
    };
    GlcmFeatures {
        asm,
        homogeneity,
        contrast,
        correlation,
        degenerate,
    }
}
