//! Self-supervised training of the enhancement network and corpus-level
//! enhancement.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enhancement::{apply_transform, CurveShift};
use crate::error::{ensure, Error, Result};
use crate::image::{GrayImage, ImageBatch};
use crate::losses::{dce_objective_grad, image_gaussian, GaussianParams, LossBreakdown, LossWeights, ObjectiveConfig};
use crate::model::{backward_plane, forward_plane, init_params, ModelParams, UNetConfig};
use crate::nn::{ParamSet, Tensor};
use crate::optim::{Adam, AdamConfig};
use crate::seed;

pub const BATCH_SIZES: [usize; 3] = [32, 64, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_decay_lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub ts: f64,
    pub kernel_size: usize,
    pub temperature: f64,
    pub shift: CurveShift,
    pub unet: UNetConfig,
    /// Accept hyperparameters outside the recommended ranges.
    pub force: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            lr_decay_lambda: 0.95,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            weights: LossWeights::default(),
            ts: 1.0,
            kernel_size: 4,
            temperature: 0.1,
            shift: CurveShift::default(),
            unet: UNetConfig::default(),
            force: false,
        }
    }
}

fn in_range(name: &str, v: f64, lo: f64, hi: f64, force: bool) -> Result<()> {
    ensure!(v.is_finite(), Config, "{name} must be finite, got {v}");
    ensure!(
        force || (lo..=hi).contains(&v),
        Config,
        "{name} = {v} outside [{lo}, {hi}]; pass force to override"
    );
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        in_range("learning_rate", self.learning_rate, 1e-6, 1e-3, self.force)?;
        in_range("weight_decay", self.weight_decay, 1e-5, 1e-2, self.force)?;
        in_range("lr_decay_lambda", self.lr_decay_lambda, 0.6, 1.0, self.force)?;
        ensure!(
            self.learning_rate > 0.0 && self.weight_decay >= 0.0 && self.lr_decay_lambda > 0.0,
            Config,
            "learning rate and decay must be positive"
        );
        ensure!(self.batch_size >= 1, Config, "batch_size must be positive");
        ensure!(
            self.force || BATCH_SIZES.contains(&self.batch_size),
            Config,
            "batch_size {} not one of {BATCH_SIZES:?}; pass force to override",
            self.batch_size
        );
        ensure!(self.ts > 0.0 && self.ts.is_finite(), Config, "ts must be positive");
        ensure!(self.kernel_size >= 1, Config, "kernel_size must be positive");
        ensure!(
            self.temperature > 0.0 && self.temperature.is_finite(),
            Config,
            "temperature must be positive"
        );
        self.weights.validate()?;
        self.shift.validate()?;
        self.unet.validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights,
            ts: self.ts,
            kernel_size: self.kernel_size,
            temperature: self.temperature,
            shift: self.shift,
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_lambda.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    /// Mean loss components over the images seen in each epoch, measured
    /// before that epoch's updates.
    pub epochs: Vec<LossBreakdown>,
    /// Kept out of serialized reports so reruns compare byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }
}

/// Training aborted on a non-finite loss or gradient.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: ModelParams,
    pub report: TrainReport,
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

fn check_corpus(corpus: &[GrayImage], config: &TrainConfig) -> Result<()> {
    ensure!(!corpus.is_empty(), Parameter, "training corpus is empty");
    let s = config.unet.stride();
    for (i, img) in corpus.iter().enumerate() {
        let (w, h) = img.dims();
        ensure!(
            w % s == 0 && h % s == 0 && w % config.kernel_size == 0 && h % config.kernel_size == 0,
            Dimension,
            "image {i} is {w}x{h}; sides must be divisible by {s} and by kernel size {}",
            config.kernel_size
        );
    }
    Ok(())
}

/// Loss and parameter gradient for a single image.
fn image_step(
    params: &ModelParams,
    img: &GrayImage,
    gaussian: GaussianParams,
    objective: &ObjectiveConfig,
    scale: f64,
) -> Result<(LossBreakdown, ParamSet)> {
    let (w, h) = img.dims();
    let plane = Tensor::from_plane(h, w, img.pixels().to_vec());
    let (alphas, cache) = forward_plane(params, plane);
    let a = ImageBatch::single(w, h, alphas)?;
    let x = ImageBatch::single(w, h, img.pixels().to_vec())?;
    let (loss, mut grad) = dce_objective_grad(&a, &x, &[gaussian], objective)?;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss, backward_plane(params, &cache, &grad)))
}

fn mean_breakdown(parts: &[LossBreakdown], weights: LossWeights) -> LossBreakdown {
    let n = parts.len() as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        adaptive: sum(|b| b.adaptive),
        local_conflict: sum(|b| b.local_conflict),
        region_conflict: sum(|b| b.region_conflict),
        total: sum(|b| b.total),
        weights,
    }
}

/// Trains from the seeded initialization.
pub fn train_dce(
    corpus: &[GrayImage],
    config: &TrainConfig,
) -> std::result::Result<(ModelParams, TrainReport), TrainFailure> {
    let init = init_params(config.unet, config.seed).map_err(|error| TrainFailure {
        error,
        last_good: ModelParams::zeros(UNetConfig::default()).expect("default config is valid"),
        report: empty_report(config.seed),
    })?;
    train_dce_from(init, corpus, config)
}

fn empty_report(seed: u64) -> TrainReport {
    TrainReport {
        seed,
        epochs: Vec::new(),
        wall_clock_secs: 0.0,
        checkpoint: None,
    }
}

/// Trains starting from `params`.
pub fn train_dce_from(
    mut params: ModelParams,
    corpus: &[GrayImage],
    config: &TrainConfig,
) -> std::result::Result<(ModelParams, TrainReport), TrainFailure> {
    let start = Instant::now();
    let mut report = empty_report(config.seed);
    macro_rules! bail {
        ($e:expr, $params:expr, $report:expr) => {{
            let mut report = $report;
            report.wall_clock_secs = start.elapsed().as_secs_f64();
            return Err(TrainFailure {
                error: $e,
                last_good: $params,
                report,
            });
        }};
    }
    let setup = config
        .validate()
        .and_then(|_| check_corpus(corpus, config))
        .and_then(|_| corpus.iter().map(image_gaussian).collect::<Result<Vec<_>>>());
    let gaussians = match setup {
        Ok(g) => g,
        Err(e) => bail!(e, params, report),
    };
    let objective = config.objective();
    let adam_cfg = AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(adam_cfg, &params.tensors);
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    for epoch in 0..config.epochs {
        let mut rng = seed::rng(config.seed, &[seed::tag("dce-shuffle"), epoch as u64]);
        order.shuffle(&mut rng);
        let lr = config.learning_rate_at(epoch);
        let mut seen = Vec::with_capacity(corpus.len());
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let results: Vec<Result<(LossBreakdown, ParamSet)>> = batch
                .par_iter()
                .map(|&i| image_step(&params, &corpus[i], gaussians[i], &objective, scale))
                .collect();
            let mut losses = Vec::with_capacity(batch.len());
            let mut grads = Vec::with_capacity(batch.len());
            for r in results {
                match r {
                    Ok((l, g)) => {
                        losses.push(l);
                        grads.push(g);
                    }
                    Err(e) => bail!(e, params, report),
                }
            }
            let grad = ParamSet::sum_ordered(&grads).expect("batch is non-empty");
            if losses.iter().any(|l| !l.is_finite()) || !grad.all_finite() {
                bail!(
                    Error::Divergence {
                        epoch,
                        reason: "non-finite loss or gradient".into(),
                    },
                    params,
                    report
                );
            }
            let mut next = params.tensors.clone();
            opt.step(&mut next, &grad, lr);
            if !next.all_finite() {
                bail!(
                    Error::Divergence {
                        epoch,
                        reason: "non-finite parameters after update".into(),
                    },
                    params,
                    report
                );
            }
            params.tensors = next;
            seen.extend(losses);
        }
        let mean = mean_breakdown(&seen, config.weights);
        log::info!(
            "epoch {epoch}: total {:.6} adaptive {:.6} local {:.6} region {:.6}",
            mean.total,
            mean.adaptive,
            mean.local_conflict,
            mean.region_conflict
        );
        report.epochs.push(mean);
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Mean loss of `params` over `corpus` without updating anything.
pub fn evaluate_loss(params: &ModelParams, corpus: &[GrayImage], config: &TrainConfig) -> Result<LossBreakdown> {
    config.validate()?;
    check_corpus(corpus, config)?;
    let objective = config.objective();
    let parts = corpus
        .par_iter()
        .map(|img| {
            let g = image_gaussian(img)?;
            Ok(image_step(params, img, g, &objective, 1.0)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_breakdown(&parts, config.weights))
}

fn pad_edges(img: &GrayImage, w: usize, h: usize) -> Result<GrayImage> {
    let (iw, ih) = img.dims();
    GrayImage::new(
        w,
        h,
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x.min(iw - 1), y.min(ih - 1))))
            .map(|(x, y)| img.get(x, y))
            .collect(),
    )
}

/// Enhances one image. Sides that are not a multiple of the network stride
/// are edge-padded for the forward pass and cropped back afterwards.
pub fn enhance_image(params: &ModelParams, img: &GrayImage, shift: CurveShift) -> Result<GrayImage> {
    let s = params.config.stride();
    let (w, h) = img.dims();
    let (pw, ph) = (w.div_ceil(s) * s, h.div_ceil(s) * s);
    let padded;
    let input = if (pw, ph) == (w, h) {
        img
    } else {
        padded = pad_edges(img, pw, ph)?;
        &padded
    };
    let a = crate::model::forward(params, input)?;
    let alphas: Vec<f64> = if (pw, ph) == (w, h) {
        a.into_alphas()
    } else {
        let full = a.alphas();
        (0..h).flat_map(|y| full[y * pw..y * pw + w].to_vec()).collect()
    };
    let a = crate::enhancement::TransformMatrix::new(w, h, alphas)?;
    apply_transform(img, &a, shift)
}

/// Output name for an enhanced image: source stem plus `-dce`.
pub fn enhanced_name(source: &Path) -> String {
    let stem = source
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    format!("{stem}-dce")
}

/// Enhances an in-memory corpus of named images, preserving order.
pub fn enhance_corpus(
    params: &ModelParams,
    corpus: &[(String, GrayImage)],
    shift: CurveShift,
) -> Result<Vec<(String, GrayImage)>> {
    corpus
        .par_iter()
        .map(|(name, img)| Ok((format!("{name}-dce"), enhance_image(params, img, shift)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_batch;

    fn tiny_corpus(n: usize) -> Vec<GrayImage> {
        (0..n)
            .map(|i| {
                let noise = random_batch(1, 16, 16, 100 + i as u64);
                GrayImage::from_fn(16, 16, |x, y| {
                    let r = ((x as f64 - 7.5).powi(2) + (y as f64 - 7.5).powi(2)).sqrt();
                    0.6 - r / 12.0 + 0.05 * noise.data()[y * 16 + x]
                })
                .unwrap()
            })
            .collect()
    }

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            learning_rate: 1e-3,
            force: true,
            unet: UNetConfig {
                levels: 2,
                base_channels: 4,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_ranges() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(TrainConfig { force: true, ..bad }.validate().is_ok());
        let bad_batch = TrainConfig {
            batch_size: 16,
            ..TrainConfig::default()
        };
        assert!(bad_batch.validate().is_err());
        let c = TrainConfig::default();
        assert!((c.learning_rate_at(2) - 1e-4 * 0.95 * 0.95).abs() < 1e-18);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = small_config(0);
        let (params, report) = train_dce(&tiny_corpus(2), &cfg).unwrap();
        assert_eq!(params, init_params(cfg.unet, cfg.seed).unwrap());
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = train_dce(&[], &small_config(1)).unwrap_err();
        assert!(matches!(err.error, Error::Parameter(_)));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let corpus = tiny_corpus(4);
        let cfg = small_config(12);
        let (p1, r1) = train_dce(&corpus, &cfg).unwrap();
        let (p2, r2) = train_dce(&corpus, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.epochs, r2.epochs);
        assert_eq!(r1.epochs.len(), 12);
        let t = r1.totals();
        assert!(t.iter().all(|v| v.is_finite()));
        assert!(t[11] < t[0], "{t:?}");
    }

    #[test]
    fn enhance_pads_odd_sizes_and_names_outputs() {
        let params = init_params(UNetConfig::default(), 1).unwrap();
        let img = GrayImage::from_fn(13, 10, |x, y| (x as f64 - y as f64) / 20.0).unwrap();
        let out = enhance_corpus(&params, &[("scan".into(), img)], CurveShift::default()).unwrap();
        assert_eq!(out[0].0, "scan-dce");
        assert_eq!(out[0].1.dims(), (13, 10));
        assert!(enhance_corpus(&params, &[], CurveShift::default()).unwrap().is_empty());
        assert_eq!(enhanced_name(Path::new("dir/a.b.png")), "a.b-dce");
    }
}
