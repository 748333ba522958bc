//! AUC, pointing-game hit rate and the split protocol for in-distribution
//! cross-validation, zero-shot and few-shot out-of-distribution evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::Mask;
use crate::phantom::BoundingBox;
use crate::seed;

/// Probability that a random positive outscores a random negative, ties
/// counted one half, via average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    ensure!(scores.len() == labels.len(), Dimension, "scores and labels differ in length");
    ensure!(scores.iter().all(|s| !s.is_nan()), Parameter, "scores must not be NaN");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative samples".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based average ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Target region of one image.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Box(BoundingBox),
    Mask(Mask),
}

impl Target {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match self {
            Target::Box(b) => b.contains(x, y),
            Target::Mask(m) => {
                let (w, h) = m.dims();
                x < w && y < h && m.is_masked(x, y)
            }
        }
    }
}

/// First maximum of a row-major map, as `(x, y)`.
pub fn argmax_point(map: &[f64], width: usize) -> Result<(usize, usize)> {
    ensure!(!map.is_empty() && width >= 1, Parameter, "attention map is empty");
    let best = map
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > map[b] { i } else { b });
    Ok((best % width, best / width))
}

/// Fraction of points inside their targets, boundaries inclusive.
pub fn hit_rate(points: &[(usize, usize)], targets: &[Target]) -> Result<f64> {
    ensure!(!points.is_empty(), Parameter, "hit rate needs at least one image");
    ensure!(points.len() == targets.len(), Dimension, "one target per point required");
    let hits = points.iter().zip(targets).filter(|((x, y), t)| t.contains(*x, *y)).count();
    Ok(hits as f64 / points.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateReport {
    pub overall: f64,
    pub count: usize,
    pub by_category: BTreeMap<String, f64>,
    pub hits: Vec<bool>,
}

/// Hit rate overall and per category label.
pub fn hit_rate_report(points: &[(usize, usize)], targets: &[Target], categories: &[String]) -> Result<HitRateReport> {
    let overall = hit_rate(points, targets)?;
    ensure!(categories.len() == points.len(), Dimension, "one category per point required");
    let hits: Vec<bool> = points.iter().zip(targets).map(|((x, y), t)| t.contains(*x, *y)).collect();
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (c, &h) in categories.iter().zip(&hits) {
        let e = groups.entry(c.clone()).or_default();
        e.0 += usize::from(h);
        e.1 += 1;
    }
    Ok(HitRateReport {
        overall,
        count: points.len(),
        by_category: groups.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect(),
        hits,
    })
}

#[derive(Debug, Deserialize)]
struct PointRow {
    image: String,
    x: usize,
    y: usize,
}

#[derive(Debug, Deserialize)]
struct BoxRow {
    image: String,
    x_min: usize,
    y_min: usize,
    x_max: usize,
    y_max: usize,
    #[serde(default)]
    category: Option<String>,
}

fn csv_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    };
    let mut r = csv::Reader::from_path(path).map_err(to_err)?;
    r.deserialize().map(|row| row.map_err(to_err)).collect()
}

/// `image,x,y` rows.
pub fn read_points_csv(path: &Path) -> Result<BTreeMap<String, (usize, usize)>> {
    Ok(csv_rows::<PointRow>(path)?.into_iter().map(|r| (r.image, (r.x, r.y))).collect())
}

/// `image,x_min,y_min,x_max,y_max[,category]` rows.
pub fn read_boxes_csv(path: &Path) -> Result<Vec<(String, BoundingBox, String)>> {
    csv_rows::<BoxRow>(path)?
        .into_iter()
        .map(|r| {
            ensure!(r.x_min <= r.x_max && r.y_min <= r.y_max, Format, "inverted box for {}", r.image);
            Ok((
                r.image,
                BoundingBox {
                    x_min: r.x_min,
                    y_min: r.y_min,
                    x_max: r.x_max,
                    y_max: r.y_max,
                },
                r.category.unwrap_or_else(|| "all".into()),
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub folds: usize,
    /// Share of the out-of-distribution set held out for testing.
    pub ood_test_ratio: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            ood_test_ratio: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Test indices of each cross-validation fold.
    pub folds: Vec<Vec<usize>>,
    pub ood_train: Vec<usize>,
    pub ood_test: Vec<usize>,
    /// Nested subsets of `ood_train`, one per requested fraction.
    pub few_shot: Vec<(f64, Vec<usize>)>,
}

impl SplitPlan {
    /// Training indices of fold `k`: everything outside its test fold.
    pub fn fold_train(&self, k: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

fn class_orders(labels: &[bool], seed: u64, stream: &str) -> [Vec<usize>; 2] {
    let mut rng = seed::rng(seed, &[seed::tag(stream)]);
    let mut out = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        out[usize::from(l)].push(i);
    }
    out.iter_mut().for_each(|v| v.shuffle(&mut rng));
    out
}

/// Stratified folds, stratified OOD hold-out and nested few-shot subsets.
pub fn make_splits(labels: &[bool], seed: u64, fractions: &[f64], config: &SplitConfig) -> Result<SplitPlan> {
    ensure!(labels.len() >= 10, Parameter, "splitting needs at least 10 samples, got {}", labels.len());
    ensure!(config.folds >= 2, Parameter, "need at least 2 folds");
    ensure!(
        config.ood_test_ratio > 0.0 && config.ood_test_ratio < 1.0,
        Parameter,
        "OOD test ratio must lie in (0, 1)"
    );
    for &f in fractions {
        ensure!(f > 0.0 && f <= 1.0, Parameter, "few-shot fraction {f} outside (0, 1]");
    }

    let mut folds = vec![Vec::new(); config.folds];
    let mut slot = 0;
    for class in class_orders(labels, seed, "cv-folds") {
        for i in class {
            folds[slot % config.folds].push(i);
            slot += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());

    let mut ood_train = Vec::new();
    let mut ood_test = Vec::new();
    let mut train_by_class = [Vec::new(), Vec::new()];
    for (c, class) in class_orders(labels, seed, "ood-split").into_iter().enumerate() {
        let n_test = (class.len() as f64 * config.ood_test_ratio).round() as usize;
        ood_test.extend_from_slice(&class[..n_test]);
        ood_train.extend_from_slice(&class[n_test..]);
        train_by_class[c] = class[n_test..].to_vec();
    }
    ood_train.sort_unstable();
    ood_test.sort_unstable();

    let few_shot = fractions
        .iter()
        .map(|&f| {
            let mut subset: Vec<usize> = train_by_class
                .iter()
                .flat_map(|class| {
                    let k = ((class.len() as f64 * f).ceil() as usize).clamp(class.len().min(1), class.len());
                    class[..k].iter().copied()
                })
                .collect();
            subset.sort_unstable();
            (f, subset)
        })
        .collect();
    Ok(SplitPlan {
        folds,
        ood_train,
        ood_test,
        few_shot,
    })
}
