//! One-dimensional Lloyd k-means over pixel intensities.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

const MAX_ITERATIONS: usize = 100;
const DRIFT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansResult {
    /// Cluster centres in ascending order.
    pub centers: Vec<f64>,
    /// Index into `centers` for every input value, in input order.
    pub assignments: Vec<u8>,
    /// Within-cluster sum of squares after each centre update.
    pub inertia_trace: Vec<f64>,
}

/// Clusters `values` into `k` groups. Centres are seeded at the
/// `(2j+1)/(2k)` quantiles, nudged onto distinct data values, so the result
/// is fully deterministic.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<KmeansResult> {
    ensure!(k >= 1 && k <= 255, Parameter, "k = {k} outside [1, 255]");
    ensure!(
        values.iter().all(|v| v.is_finite()),
        Parameter,
        "k-means input contains non-finite values"
    );
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    ensure!(
        distinct.len() >= k,
        Degenerate,
        "{} distinct values, k-means needs at least {k}",
        distinct.len()
    );

    let mut centers = quantile_seeds(&sorted, &distinct, k);
    let mut inertia_trace = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let bounds = segment_bounds(&sorted, &centers);
        let mut drift = 0.0f64;
        let mut inertia = 0.0;
        for j in 0..k {
            let segment = &sorted[bounds[j]..bounds[j + 1]];
            let Some(&first) = segment.first() else {
                continue;
            };
            // shifted mean is exact for constant segments
            let mean = first + segment.iter().map(|v| v - first).sum::<f64>() / segment.len() as f64;
            drift = drift.max((mean - centers[j]).abs());
            centers[j] = mean;
            inertia += segment.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        inertia_trace.push(inertia);
        if drift < DRIFT_TOLERANCE {
            break;
        }
    }
    centers.sort_by(f64::total_cmp);

    let assignments = values.iter().map(|&v| nearest(&centers, v) as u8).collect();
    Ok(KmeansResult {
        centers,
        assignments,
        inertia_trace,
    })
}

fn quantile_seeds(sorted: &[f64], distinct: &[f64], k: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut idx: Vec<usize> = (0..k)
        .map(|j| {
            let q = (2 * j + 1) as f64 / (2 * k) as f64;
            let v = sorted[((q * (n - 1) as f64).floor() as usize).min(n - 1)];
            distinct.partition_point(|&d| d < v)
        })
        .collect();
    for j in 1..k {
        if idx[j] <= idx[j - 1] {
            idx[j] = idx[j - 1] + 1;
        }
    }
    let last = distinct.len() - 1;
    if idx[k - 1] > last {
        idx[k - 1] = last;
    }
    for j in (0..k - 1).rev() {
        if idx[j] >= idx[j + 1] {
            idx[j] = idx[j + 1] - 1;
        }
    }
    idx.into_iter().map(|i| distinct[i]).collect()
}

/// Segment `j` of the sorted data is `bounds[j]..bounds[j+1]`; values at an
/// exact midpoint go to the lower centre.
fn segment_bounds(sorted: &[f64], centers: &[f64]) -> Vec<usize> {
    let k = centers.len();
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for j in 0..k - 1 {
        let mid = 0.5 * (centers[j] + centers[j + 1]);
        bounds.push(sorted.partition_point(|&v| v <= mid));
    }
    bounds.push(sorted.len());
    bounds
}

fn nearest(centers: &[f64], v: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &c) in centers.iter().enumerate() {
        let d = (v - c).abs();
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}
