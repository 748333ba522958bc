//! The three self-supervised enhancement objectives and their weighted sum.

mod adaptive;
mod kmeans;
mod local_conflict;
mod region;

pub use adaptive::{
    adaptive_loss, adaptive_loss_grad, gaussian_weight_map, resolve_gaussian_params,
    AdaptiveLossParams, GaussianParams, WIDTH_FLOOR,
};
pub use kmeans::{kmeans_1d, KmeansResult};
pub use local_conflict::{
    local_conflict_loss_exact, local_conflict_loss_smooth, local_conflict_loss_smooth_grad,
};
pub use region::{
    gram, region_conflict_loss, region_conflict_loss_grad, square_flatten, RowMatrix,
};

use serde::{Deserialize, Serialize};

use crate::enhancement::{apply_transform_batch, d_curve_d_alpha, CurveShift};
use crate::error::{ensure, Result};
use crate::image::{GrayImage, ImageBatch};

/// Number of intensity clusters used to place the adaptive-loss Gaussian.
pub const KMEANS_CLUSTERS: usize = 5;

/// Gaussian parameters for one image: 5-cluster k-means then the
/// median-centre resolution rule.
pub fn image_gaussian(img: &GrayImage) -> Result<GaussianParams> {
    resolve_gaussian_params(&kmeans_1d(img.pixels(), KMEANS_CLUSTERS)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adaptive: f64,
    pub local: f64,
    pub region: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adaptive: 1.0,
            local: 1.0,
            region: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            [self.adaptive, self.local, self.region]
                .iter()
                .all(|w| *w >= 0.0 && w.is_finite()),
            Parameter,
            "loss weights must be non-negative, got {self:?}"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adaptive: f64,
    /// Smooth surrogate value, the quantity actually optimized.
    pub local_conflict: f64,
    pub region_conflict: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    fn combine(adaptive: f64, local: f64, region: f64, weights: LossWeights) -> Self {
        Self {
            adaptive,
            local_conflict: local,
            region_conflict: region,
            total: weights.adaptive * adaptive + weights.local * local + weights.region * region,
            weights,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.adaptive.is_finite()
            && self.local_conflict.is_finite()
            && self.region_conflict.is_finite()
            && self.total.is_finite()
    }
}

/// Hyperparameters shared by the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub ts: f64,
    pub kernel_size: usize,
    pub temperature: f64,
    pub shift: CurveShift,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            ts: 1.0,
            kernel_size: 4,
            temperature: 0.1,
            shift: CurveShift::default(),
        }
    }
}

/// Weighted total on precomputed tensors: `alphas` (A), originals `x`, and
/// enhanced outputs `y`.
pub fn dce_total_loss(
    alphas: &ImageBatch,
    x: &ImageBatch,
    y: &ImageBatch,
    params: &[AdaptiveLossParams],
    weights: LossWeights,
    kernel_size: usize,
    temperature: f64,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let adaptive = adaptive_loss(alphas, x, params)?;
    let local = local_conflict_loss_smooth(y, x, temperature)?;
    let region = region_conflict_loss(x, y, kernel_size)?;
    Ok(LossBreakdown::combine(adaptive, local, region, weights))
}

/// Enhances `x` with `alphas`, evaluates the weighted objective and returns
/// its gradient with respect to `alphas`.
pub fn dce_objective_grad(
    alphas: &ImageBatch,
    x: &ImageBatch,
    gaussians: &[GaussianParams],
    config: &ObjectiveConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    config.weights.validate()?;
    let params: Vec<AdaptiveLossParams> = gaussians
        .iter()
        .map(|g| AdaptiveLossParams::new(config.ts, *g))
        .collect();
    let y = apply_transform_batch(x, alphas, config.shift)?;
    let (adaptive, g_adapt) = adaptive_loss_grad(alphas, x, &params)?;
    let (local, g_local) = local_conflict_loss_smooth_grad(&y, x, config.temperature)?;
    let (region, g_region) = region_conflict_loss_grad(x, &y, config.kernel_size)?;
    let w = config.weights;
    let grad = x
        .data()
        .iter()
        .zip(y.data())
        .enumerate()
        .map(|(i, (&xv, &yv))| {
            let dy_da = d_curve_d_alpha(xv, yv - config.shift.y_shift, config.shift);
            w.adaptive * g_adapt[i] + (w.local * g_local[i] + w.region * g_region[i]) * dy_da
        })
        .collect();
    Ok((LossBreakdown::combine(adaptive, local, region, w), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check, random_batch};

    fn positive(batch: &ImageBatch) -> ImageBatch {
        ImageBatch::new(
            batch.count(),
            batch.width(),
            batch.height(),
            batch.data().iter().map(|v| 0.2 + 1.5 * (v + 1.0)).collect(),
        )
        .unwrap()
    }

    fn gauss() -> GaussianParams {
        GaussianParams {
            sigma: 0.1,
            theta_literal: -0.2,
            width: 0.3,
        }
    }

    #[test]
    fn weight_selection_cases() {
        let x = random_batch(1, 8, 8, 1);
        let p = AdaptiveLossParams::new(1.3, gauss());
        let target: Vec<f64> = gaussian_weight_map(x.data(), p.sigma, p.width)
            .unwrap()
            .iter()
            .map(|g| p.ts * g)
            .collect();
        let a = ImageBatch::single(8, 8, target).unwrap();
        let y = random_batch(1, 8, 8, 2);
        let only_adaptive = LossWeights {
            adaptive: 1.0,
            local: 0.0,
            region: 0.0,
        };
        assert_eq!(dce_total_loss(&a, &x, &y, &[p], only_adaptive, 2, 0.1).unwrap().total, 0.0);
        let only_region = LossWeights {
            adaptive: 0.0,
            local: 0.0,
            region: 1.0,
        };
        assert_eq!(dce_total_loss(&a, &x, &x, &[p], only_region, 2, 0.1).unwrap().total, 0.0);
        let neg = LossWeights {
            adaptive: -1.0,
            ..LossWeights::default()
        };
        assert!(dce_total_loss(&a, &x, &x, &[p], neg, 2, 0.1).is_err());
    }

    #[test]
    fn total_is_sum_of_components() {
        for seed in 0..5 {
            let x = random_batch(2, 8, 8, seed);
            let a = positive(&random_batch(2, 8, 8, seed + 9));
            let y = random_batch(2, 8, 8, seed + 19);
            let p = AdaptiveLossParams::new(1.0, gauss());
            let b = dce_total_loss(&a, &x, &y, &[p], LossWeights::default(), 4, 0.1).unwrap();
            let sum = adaptive_loss(&a, &x, &[p]).unwrap()
                + local_conflict_loss_smooth(&y, &x, 0.1).unwrap()
                + region_conflict_loss(&x, &y, 4).unwrap();
            assert!((b.total - sum).abs() < 1e-15);
        }
    }

    #[test]
    fn objective_gradient_in_alpha() {
        let config = ObjectiveConfig {
            kernel_size: 2,
            shift: CurveShift {
                x_shift: 0.05,
                y_shift: -0.02,
            },
            ..ObjectiveConfig::default()
        };
        for seed in 0..5 {
            let x = random_batch(2, 8, 8, seed);
            let a = positive(&random_batch(2, 8, 8, seed + 3));
            let g = [gauss(), GaussianParams { sigma: -0.3, ..gauss() }];
            let (_, grad) = dce_objective_grad(&a, &x, &g, &config).unwrap();
            fd_check(a.data(), &grad, 1e-4, 1e-4, |v| {
                let aa = ImageBatch::new(2, 8, 8, v.to_vec()).unwrap();
                dce_objective_grad(&aa, &x, &g, &config).unwrap().0.total
            });
        }
    }
}
