//! Dataset-level domain gap: texture and intensity descriptors, kernel MMD
//! between datasets and a 2-D classical MDS embedding.

mod glcm;
mod mds;
mod report;

pub use glcm::{
    glcm, glcm_features, glcm_from_levels, quantize, Direction, Glcm, GlcmFeatures, DEFAULT_DISTANCE,
    DEFAULT_LEVELS,
};
pub use mds::classical_mds;
pub use report::{feature_csv_header, scatter_svg, write_features_csv, DomainGapReport};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::GrayImage;

pub const FEATURE_LEN: usize = 18;

/// Mean, standard deviation, then (ASM, homogeneity, contrast, correlation)
/// for 0, 45, 90 and 135 degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainFeatureVector {
    pub values: Vec<f64>,
    /// Set when any direction had a zero-variance marginal.
    pub degenerate: bool,
}

pub fn feature_vector(img: &GrayImage, levels: usize, distance: usize) -> Result<DomainFeatureVector> {
    let mut values = Vec::with_capacity(FEATURE_LEN);
    values.push(img.mean());
    values.push(img.std());
    let mut degenerate = false;
    for dir in Direction::ALL {
        let f = glcm_features(&glcm(img, levels, dir, distance)?);
        values.extend([f.asm, f.homogeneity, f.contrast, f.correlation]);
        degenerate |= f.degenerate;
    }
    Ok(DomainFeatureVector { values, degenerate })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise Euclidean distance of the pooled points.
    Median,
}

/// Median of the non-zero pairwise distances; 1 when all points coincide.
pub fn median_heuristic(points: &[&[f64]]) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let v = sq_dist(points[i], points[j]).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn resolve_bandwidth(bandwidth: Bandwidth, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let h = match bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Median => {
            let pooled: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
            median_heuristic(&pooled)
        }
    };
    ensure!(h > 0.0 && h.is_finite(), Parameter, "kernel bandwidth must be positive, got {h}");
    Ok(h)
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], h: f64) -> f64 {
    let s = 1.0 / (2.0 * h * h);
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += (-sq_dist(x, y) * s).exp();
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel on the vectors as
/// given; callers standardize beforehand.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: Bandwidth) -> Result<f64> {
    ensure!(!a.is_empty() && !b.is_empty(), Parameter, "MMD needs two non-empty sets");
    let dim = a[0].len();
    ensure!(
        a.iter().chain(b).all(|v| v.len() == dim),
        Dimension,
        "feature vectors differ in length"
    );
    let h = resolve_bandwidth(bandwidth, a, b)?;
    let v = mean_kernel(a, a, h) + mean_kernel(b, b, h) - 2.0 * mean_kernel(a, b, h);
    Ok(v.max(0.0))
}

/// Zero-mean, unit-variance per component over all given sets jointly.
/// Constant components are centred only.
pub fn standardize(sets: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let all: Vec<&Vec<f64>> = sets.iter().flatten().collect();
    let dim = all.first().map_or(0, |v| v.len());
    let n = all.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|k| all.iter().map(|v| v[k]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..dim)
        .map(|k| (all.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    sets.iter()
        .map(|set| {
            set.iter()
                .map(|v| {
                    (0..dim)
                        .map(|k| {
                            let c = v[k] - mean[k];
                            if std[k] > 1e-12 {
                                c / std[k]
                            } else {
                                c
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// How features are standardized and the kernel width chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardization {
    /// One standardization and one bandwidth for all datasets, so every
    /// entry uses the same kernel.
    Global,
    /// Standardize and pick the bandwidth separately on each pair's union.
    PerPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub labels: Vec<String>,
    /// Squared MMD estimates.
    pub mmd2: Vec<Vec<f64>>,
    /// `sqrt(mmd2)`, the RKHS distance between mean embeddings.
    pub distances: Vec<Vec<f64>>,
    /// Kernel width used; `None` under per-pair selection.
    pub bandwidth: Option<f64>,
}

pub fn domain_distance_matrix(
    datasets: &[(String, Vec<Vec<f64>>)],
    bandwidth: Bandwidth,
    standardization: Standardization,
) -> Result<DistanceMatrix> {
    ensure!(datasets.len() >= 2, Parameter, "domain gap needs at least 2 datasets");
    ensure!(
        datasets.iter().all(|(_, s)| !s.is_empty()),
        Parameter,
        "every dataset needs at least one feature vector"
    );
    let n = datasets.len();
    let mut mmd2 = vec![vec![0.0; n]; n];
    let sets: Vec<Vec<Vec<f64>>> = datasets.iter().map(|(_, s)| s.clone()).collect();
    let mut used = None;
    match standardization {
        Standardization::Global => {
            let std_sets = standardize(&sets);
            let all: Vec<Vec<f64>> = std_sets.iter().flatten().cloned().collect();
            let h = resolve_bandwidth(bandwidth, &all, &[])?;
            used = Some(h);
            for i in 0..n {
                for j in i + 1..n {
                    let v = mmd(&std_sets[i], &std_sets[j], Bandwidth::Fixed(h))?;
                    mmd2[i][j] = v;
                    mmd2[j][i] = v;
                }
            }
        }
        Standardization::PerPair => {
            for i in 0..n {
                for j in i + 1..n {
                    let pair = standardize(&[sets[i].clone(), sets[j].clone()]);
                    let v = mmd(&pair[0], &pair[1], bandwidth)?;
                    mmd2[i][j] = v;
                    mmd2[j][i] = v;
                }
            }
        }
    }
    let distances = mmd2.iter().map(|r| r.iter().map(|v| v.sqrt()).collect()).collect();
    Ok(DistanceMatrix {
        labels: datasets.iter().map(|(l, _)| l.clone()).collect(),
        mmd2,
        distances,
        bandwidth: used,
    })
}
