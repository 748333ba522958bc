//! Adaptive loss: pull the sensitivity map towards a Gaussian of the input
//! centred on the image's median intensity cluster.

use serde::{Deserialize, Serialize};

use super::kmeans::KmeansResult;
use crate::error::{ensure, Error, Result};
use crate::image::ImageBatch;

/// Lower bound applied to the resolved Gaussian width.
pub const WIDTH_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub sigma: f64,
    /// `min(c2, c4)` of the sorted centres, exactly as the formula reads.
    pub theta_literal: f64,
    /// `max(WIDTH_FLOOR, |theta_literal - sigma|)`, used as standard deviation.
    pub width: f64,
}

/// Picks the Gaussian mean and width from five sorted cluster centres
/// (1-based: mean = c3, theta = min(c2, c4)).
pub fn resolve_gaussian_params(km: &KmeansResult) -> Result<GaussianParams> {
    ensure!(
        km.centers.len() == 5,
        Parameter,
        "expected 5 cluster centres, got {}",
        km.centers.len()
    );
    ensure!(
        km.centers.windows(2).all(|w| w[0] <= w[1]),
        Parameter,
        "cluster centres must be sorted ascending"
    );
    let c = &km.centers;
    let sigma = c[2];
    let theta_literal = c[1].min(c[3]);
    Ok(GaussianParams {
        sigma,
        theta_literal,
        width: (theta_literal - sigma).abs().max(WIDTH_FLOOR),
    })
}

pub fn gaussian_weight_map(values: &[f64], sigma: f64, width: f64) -> Result<Vec<f64>> {
    ensure!(
        width > 0.0 && width.is_finite(),
        Parameter,
        "Gaussian width must be positive, got {width}"
    );
    let denom = 2.0 * width * width;
    Ok(values
        .iter()
        .map(|&v| (-(v - sigma) * (v - sigma) / denom).exp())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveLossParams {
    /// Transformation strength scaling the Gaussian target.
    pub ts: f64,
    pub sigma: f64,
    pub width: f64,
}

impl AdaptiveLossParams {
    pub fn new(ts: f64, gaussian: GaussianParams) -> Self {
        Self {
            ts,
            sigma: gaussian.sigma,
            width: gaussian.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.ts > 0.0, Parameter, "TS must be positive, got {}", self.ts);
        ensure!(
            self.width > 0.0,
            Parameter,
            "Gaussian width must be positive, got {}",
            self.width
        );
        Ok(())
    }
}

fn params_for<'a>(
    params: &'a [AdaptiveLossParams],
    count: usize,
) -> Result<impl Fn(usize) -> &'a AdaptiveLossParams> {
    ensure!(
        params.len() == 1 || params.len() == count,
        Dimension,
        "{} adaptive-loss parameter sets for a batch of {count}",
        params.len()
    );
    for p in params {
        p.validate()?;
    }
    Ok(move |i: usize| if params.len() == 1 { &params[0] } else { &params[i] })
}

/// `||A - TS * G(X)||^2 / (2 B C W H)` together with its gradient in `A`.
///
/// `params` holds one entry per image, or a single entry shared by all.
pub fn adaptive_loss_grad(
    alphas: &ImageBatch,
    images: &ImageBatch,
    params: &[AdaptiveLossParams],
) -> Result<(f64, Vec<f64>)> {
    if !alphas.same_shape(images) {
        return Err(Error::Dimension(
            "transformation matrix batch and image batch differ in shape".into(),
        ));
    }
    let pick = params_for(params, images.count())?;
    let denom = images.data().len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(alphas.data().len());
    for (i, (a_plane, x_plane)) in alphas.planes().zip(images.planes()).enumerate() {
        let p = pick(i);
        let target = gaussian_weight_map(x_plane, p.sigma, p.width)?;
        for (&a, g) in a_plane.iter().zip(target) {
            let r = a - p.ts * g;
            sum += r * r;
            grad.push(r / denom);
        }
    }
    Ok((sum / (2.0 * denom), grad))
}

pub fn adaptive_loss(
    alphas: &ImageBatch,
    images: &ImageBatch,
    params: &[AdaptiveLossParams],
) -> Result<f64> {
    adaptive_loss_grad(alphas, images, params).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn km(centers: &[f64]) -> KmeansResult {
        KmeansResult {
            centers: centers.to_vec(),
            assignments: vec![],
            inertia_trace: vec![],
        }
    }

    #[test]
    fn resolution_rule_examples() {
        let g = resolve_gaussian_params(&km(&[-0.8, -0.4, 0.0, 0.4, 0.8])).unwrap();
        assert_eq!((g.sigma, g.theta_literal, g.width), (0.0, -0.4, 0.4));

        let g = resolve_gaussian_params(&km(&[0.1, 0.2, 0.3, 0.4, 0.5])).unwrap();
        assert_eq!(g.sigma, 0.3);
        assert_eq!(g.theta_literal, 0.2);
        assert!((g.width - 0.1).abs() < 1e-15);

        let c = [0.05, 0.2, 0.3, 0.6, 0.9];
        let mirrored: Vec<f64> = c.iter().rev().map(|v| -v).collect();
        let a = resolve_gaussian_params(&km(&c)).unwrap();
        let b = resolve_gaussian_params(&km(&mirrored)).unwrap();
        // literal rule on mirrored centres uses c4 instead of c2
        assert_eq!(a.sigma, -b.sigma);
        let sym = resolve_gaussian_params(&km(&[-0.7, -0.3, 0.0, 0.3, 0.7])).unwrap();
        let sym_m = resolve_gaussian_params(&km(&[-0.7, -0.3, -0.0, 0.3, 0.7])).unwrap();
        assert_eq!(sym.width, sym_m.width);
    }

    #[test]
    fn collapsed_centres_hit_width_floor() {
        let g = resolve_gaussian_params(&km(&[0.0, 0.5, 0.5, 0.5, 0.9])).unwrap();
        assert_eq!(g.width, WIDTH_FLOOR);
        assert!(resolve_gaussian_params(&km(&[0.0, 0.1])).is_err());
    }

    #[test]
    fn gaussian_map_values() {
        let m = gaussian_weight_map(&[0.2, 0.5, 100.0], 0.2, 0.3).unwrap();
        assert_eq!(m[0], 1.0);
        // exp(-1/2) = 0.60653065971263342360...
        assert!((m[1] - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!(m[2] >= 0.0 && m[2] < 1e-300);
        let flat = gaussian_weight_map(&[-1.0, 0.0, 1.0], 0.0, 1e6).unwrap();
        assert!(flat.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(gaussian_weight_map(&[0.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn closed_form_cases() {
        let x = ImageBatch::new(2, 3, 4, (0..24).map(|i| i as f64 / 12.0 - 1.0).collect()).unwrap();
        let p = AdaptiveLossParams {
            ts: 1.7,
            sigma: 0.1,
            width: 0.35,
        };
        let target: Vec<f64> = gaussian_weight_map(x.data(), p.sigma, p.width)
            .unwrap()
            .into_iter()
            .map(|g| p.ts * g)
            .collect();
        let exact = ImageBatch::new(2, 3, 4, target.clone()).unwrap();
        assert_eq!(adaptive_loss(&exact, &x, &[p]).unwrap(), 0.0);
        let plus_one = ImageBatch::new(2, 3, 4, target.iter().map(|t| t + 1.0).collect()).unwrap();
        assert!((adaptive_loss(&plus_one, &x, &[p]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::testutil::{fd_check, random_batch};
        for seed in 0..5 {
            let x = random_batch(2, 8, 8, seed);
            let a = random_batch(2, 8, 8, seed + 30);
            let p = [
                AdaptiveLossParams {
                    ts: 1.0,
                    sigma: 0.0,
                    width: 0.4,
                },
                AdaptiveLossParams {
                    ts: 2.0,
                    sigma: -0.2,
                    width: 0.25,
                },
            ];
            let (_, grad) = adaptive_loss_grad(&a, &x, &p).unwrap();
            fd_check(a.data(), &grad, 1e-4, 1e-4, |v| {
                adaptive_loss(&ImageBatch::new(2, 8, 8, v.to_vec()).unwrap(), &x, &p).unwrap()
            });
        }
    }

    #[test]
    fn shape_and_param_errors() {
        let x = ImageBatch::new(1, 2, 2, vec![0.0; 4]).unwrap();
        let a = ImageBatch::new(1, 2, 3, vec![1.0; 6]).unwrap();
        let p = AdaptiveLossParams {
            ts: 1.0,
            sigma: 0.0,
            width: 0.1,
        };
        assert!(matches!(adaptive_loss(&a, &x, &[p]), Err(Error::Dimension(_))));
        let bad = AdaptiveLossParams { ts: 0.0, ..p };
        assert!(matches!(adaptive_loss(&x, &x, &[bad]), Err(Error::Parameter(_))));
        assert!(matches!(adaptive_loss(&x, &x, &[p, p]), Err(Error::Dimension(_))));
    }
}
