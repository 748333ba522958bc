//! Binary classifier on top of the contrastive encoder: global-pooled
//! features, standardized, then an affine map and a logistic link.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{encoder_backward, encoder_forward, prepare_input, EncoderParams};
use crate::error::{ensure, Result};
use crate::image::GrayImage;
use crate::nn::{sigmoid, softplus, NamedTensor, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Encoder frozen; only the head is optimized.
    LinearProbe,
    /// Encoder and head optimized jointly.
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Optimizer steps; full-batch for probing, minibatch for fine-tuning.
    pub steps: usize,
    /// Minibatch size when fine-tuning.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::LinearProbe,
            learning_rate: 0.05,
            weight_decay: 1e-4,
            steps: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "classifier learning_rate must be positive"
        );
        ensure!(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            Config,
            "classifier weight_decay must be non-negative"
        );
        ensure!(self.batch_size >= 1, Config, "classifier batch_size must be positive");
        Ok(())
    }
}

/// Standardization followed by an affine logistic layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticHead {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl LogisticHead {
    /// Zero-weight head whose standardization matches `features`.
    pub fn fitted_to(features: &[Vec<f64>]) -> Result<Self> {
        ensure!(!features.is_empty(), Parameter, "no feature vectors");
        let d = features[0].len();
        ensure!(
            features.iter().all(|f| f.len() == d),
            Dimension,
            "feature vectors differ in length"
        );
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n)
            .collect();
        let scale = (0..d)
            .map(|j| {
                let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            mean,
            scale,
            weight: vec![0.0; d],
            bias: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    fn standardize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        self.bias
            + self
                .standardize(features)
                .iter()
                .zip(&self.weight)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    pub fn probability(&self, features: &[f64]) -> f64 {
        sigmoid(self.logit(features))
    }

    fn params(&self) -> ParamSet {
        let mut p = ParamSet::default();
        p.push(NamedTensor {
            name: "head.weight".into(),
            shape: vec![self.dim()],
            data: self.weight.clone(),
        });
        p.push(NamedTensor {
            name: "head.bias".into(),
            shape: vec![1],
            data: vec![self.bias],
        });
        p
    }

    fn set_params(&mut self, p: &ParamSet) {
        self.weight.copy_from_slice(p.get(0));
        self.bias = p.get(1)[0];
    }
}

/// Mean binary cross-entropy of `head` over `features`, with the gradient
/// with respect to the head parameters and to each feature vector.
fn bce_pass(head: &LogisticHead, features: &[Vec<f64>], labels: &[bool]) -> (f64, ParamSet, Vec<Vec<f64>>) {
    let n = features.len() as f64;
    let mut grads = head.params().zeros_like();
    let mut loss = 0.0;
    let mut feature_grads = Vec::with_capacity(features.len());
    for (f, &y) in features.iter().zip(labels) {
        let x = head.standardize(f);
        let z = head.bias + x.iter().zip(&head.weight).map(|(a, b)| a * b).sum::<f64>();
        let t = f64::from(u8::from(y));
        loss += softplus(z) - t * z;
        let gz = (sigmoid(z) - t) / n;
        for (g, v) in grads.get_mut(0).iter_mut().zip(&x) {
            *g += gz * v;
        }
        grads.get_mut(1)[0] += gz;
        feature_grads.push(
            head.weight
                .iter()
                .zip(&head.scale)
                .map(|(w, s)| gz * w / s)
                .collect(),
        );
    }
    (loss / n, grads, feature_grads)
}

fn check_labels(labels: &[bool]) -> Result<()> {
    ensure!(
        labels.iter().any(|&l| l) && labels.iter().any(|&l| !l),
        Parameter,
        "classifier training needs both classes, got {} samples of one class",
        labels.len()
    );
    Ok(())
}

/// Full-batch training of a logistic head on fixed features, starting from
/// `head` (its standardization is kept). Returns the per-step losses.
pub fn train_head(
    head: &mut LogisticHead,
    features: &[Vec<f64>],
    labels: &[bool],
    config: &ClassifierConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    ensure!(
        features.len() == labels.len(),
        Dimension,
        "{} feature vectors for {} labels",
        features.len(),
        labels.len()
    );
    check_labels(labels)?;
    ensure!(
        features.iter().all(|f| f.len() == head.dim()),
        Dimension,
        "feature length differs from head width {}",
        head.dim()
    );
    let mut params = head.params();
    let mut opt = Adam::new(
        AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (loss, grads, _) = bce_pass(head, features, labels);
        ensure!(loss.is_finite(), Degenerate, "non-finite classifier loss at step {step}");
        losses.push(loss);
        opt.step(&mut params, &grads, config.learning_rate);
        head.set_params(&params);
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: EncoderParams,
    pub head: LogisticHead,
}

pub fn extract_features(encoder: &EncoderParams, images: &[GrayImage]) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|img| {
            let prepared = prepare_input(img, &encoder.spec)?;
            Ok(encoder_forward(encoder, &prepared)?.0)
        })
        .collect()
}

impl Classifier {
    /// Lesion probability per image.
    pub fn predict(&self, images: &[GrayImage]) -> Result<Vec<f64>> {
        Ok(extract_features(&self.encoder, images)?
            .iter()
            .map(|f| self.head.probability(f))
            .collect())
    }
}

/// Trains a fresh head (standardized on the training features) over `encoder`.
pub fn train_classifier(
    encoder: EncoderParams,
    images: &[GrayImage],
    labels: &[bool],
    config: &ClassifierConfig,
) -> Result<(Classifier, Vec<f64>)> {
    check_labels(labels)?;
    let features = extract_features(&encoder, images)?;
    let head = LogisticHead::fitted_to(&features)?;
    continue_training(Classifier { encoder, head }, images, labels, config)
}

/// Further training of an existing classifier, as used for few-shot
/// adaptation; the head keeps its standardization.
pub fn continue_training(
    mut classifier: Classifier,
    images: &[GrayImage],
    labels: &[bool],
    config: &ClassifierConfig,
) -> Result<(Classifier, Vec<f64>)> {
    config.validate()?;
    ensure!(
        images.len() == labels.len(),
        Dimension,
        "{} images for {} labels",
        images.len(),
        labels.len()
    );
    check_labels(labels)?;
    let losses = match config.mode {
        TrainMode::LinearProbe => {
            let features = extract_features(&classifier.encoder, images)?;
            train_head(&mut classifier.head, &features, labels, config)?
        }
        TrainMode::FineTune => fine_tune(&mut classifier, images, labels, config)?,
    };
    Ok((classifier, losses))
}

fn fine_tune(
    classifier: &mut Classifier,
    images: &[GrayImage],
    labels: &[bool],
    config: &ClassifierConfig,
) -> Result<Vec<f64>> {
    let prepared = images
        .iter()
        .map(|img| prepare_input(img, &classifier.encoder.spec))
        .collect::<Result<Vec<_>>>()?;
    let adam = AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let mut head_params = classifier.head.params();
    let mut opt_head = Adam::new(adam, &head_params);
    let mut opt_enc = Adam::new(adam, &classifier.encoder.tensors);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut pass = 0u64;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if cursor >= order.len() {
            order.shuffle(&mut seed::rng(config.seed, &[seed::tag("finetune-shuffle"), pass]));
            pass += 1;
            cursor = 0;
        }
        let batch: Vec<usize> = order[cursor..(cursor + config.batch_size).min(order.len())].to_vec();
        cursor += batch.len();
        let forwards = batch
            .par_iter()
            .map(|&i| encoder_forward(&classifier.encoder, &prepared[i]))
            .collect::<Result<Vec<_>>>()?;
        let features: Vec<Vec<f64>> = forwards.iter().map(|(f, _)| f.clone()).collect();
        let batch_labels: Vec<bool> = batch.iter().map(|&i| labels[i]).collect();
        if !(batch_labels.iter().any(|&l| l) && batch_labels.iter().any(|&l| !l)) {
            log::debug!("fine-tune step {step}: single-class minibatch");
        }
        let (loss, head_grads, feature_grads) = bce_pass(&classifier.head, &features, &batch_labels);
        ensure!(loss.is_finite(), Degenerate, "non-finite classifier loss at step {step}");
        let parts: Vec<ParamSet> = forwards
            .par_iter()
            .zip(&feature_grads)
            .map(|((_, cache), g)| encoder_backward(&classifier.encoder, cache, g))
            .collect();
        let enc_grads = ParamSet::sum_ordered(&parts).expect("non-empty batch");
        opt_head.step(&mut head_params, &head_grads, config.learning_rate);
        classifier.head.set_params(&head_params);
        opt_enc.step(&mut classifier.encoder.tensors, &enc_grads, config.learning_rate);
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::{init_encoder, EncoderSpec};
    use crate::testutil::fd_check;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = crate::seed::rng(seed, &[]);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2 == 0;
            let shift = if y { 1.0 } else { -1.0 };
            // separable along (1, 1) with margin, offset and scaled per axis
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(0.3..1.5);
            features.push(vec![10.0 + 3.0 * (a + shift * b), 0.5 * (-a + shift * b) - 4.0, rng.gen_range(-1.0..1.0)]);
            labels.push(y);
        }
        (features, labels)
    }

    fn accuracy(head: &LogisticHead, features: &[Vec<f64>], labels: &[bool]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &y)| (head.logit(f) > 0.0) == y)
            .count();
        hits as f64 / labels.len() as f64
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let (features, labels) = toy(60, 0);
        let mut head = LogisticHead::fitted_to(&features).unwrap();
        let config = ClassifierConfig::default();
        let losses = train_head(&mut head, &features, &labels, &config).unwrap();
        assert_eq!(losses.len(), 200);
        assert_eq!(accuracy(&head, &features, &labels), 1.0);
        // first step count at which the seed-0 run separates the data
        let mut probe = LogisticHead::fitted_to(&features).unwrap();
        let mut steps = 0;
        while accuracy(&probe, &features, &labels) < 1.0 {
            train_head(&mut probe, &features, &labels, &ClassifierConfig { steps: 1, ..config.clone() }).unwrap();
            steps += 1;
            assert!(steps <= 200);
        }
        assert_eq!(steps, 4);
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let (features, labels) = toy(12, 3);
        let mut head = LogisticHead::fitted_to(&features).unwrap();
        head.weight = vec![0.4, -0.3, 0.2];
        head.bias = 0.1;
        let (_, grads, feature_grads) = bce_pass(&head, &features, &labels);
        let theta = head.params().flatten();
        fd_check(&theta, &grads.flatten(), 1e-5, 1e-6, |t| {
            let mut h = head.clone();
            h.weight.copy_from_slice(&t[..3]);
            h.bias = t[3];
            bce_pass(&h, &features, &labels).0
        });
        fd_check(&features[4], &feature_grads[4], 1e-5, 1e-6, |f| {
            let mut fs = features.clone();
            fs[4] = f.to_vec();
            bce_pass(&head, &fs, &labels).0
        });
    }

    #[test]
    fn single_class_is_rejected() {
        let (features, _) = toy(6, 1);
        let mut head = LogisticHead::fitted_to(&features).unwrap();
        let err = train_head(&mut head, &features, &[true; 6], &ClassifierConfig::default());
        assert!(matches!(err, Err(crate::Error::Parameter(_))));
    }

    fn images(n: usize) -> (Vec<GrayImage>, Vec<bool>) {
        let imgs = (0..n)
            .map(|i| {
                let bright = i % 2 == 0;
                GrayImage::from_fn(16, 16, |x, y| {
                    let blob = if bright && (5..11).contains(&x) && (5..11).contains(&y) { 0.6 } else { 0.0 };
                    -0.3 + blob + 0.05 * (((x * 3 + y * 5 + i) % 7) as f64 - 3.0)
                })
                .unwrap()
            })
            .collect();
        (imgs, (0..n).map(|i| i % 2 == 0).collect())
    }

    fn small_encoder() -> EncoderParams {
        let spec = EncoderSpec {
            channels: vec![4, 6],
            projection_hidden: 4,
            projection_dim: 2,
            input_side: 16,
        };
        init_encoder(&spec, 2).unwrap()
    }

    #[test]
    fn linear_probe_freezes_encoder_and_is_deterministic() {
        let (imgs, labels) = images(10);
        let enc = small_encoder();
        let config = ClassifierConfig {
            steps: 50,
            ..ClassifierConfig::default()
        };
        let (a, la) = train_classifier(enc.clone(), &imgs, &labels, &config).unwrap();
        let (b, lb) = train_classifier(enc.clone(), &imgs, &labels, &config).unwrap();
        assert_eq!(a.encoder, enc);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la.last().unwrap() < la.first().unwrap());
        let scores = a.predict(&imgs).unwrap();
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn fine_tuning_moves_encoder_and_lowers_loss() {
        let (imgs, labels) = images(8);
        let enc = small_encoder();
        let config = ClassifierConfig {
            mode: TrainMode::FineTune,
            steps: 30,
            batch_size: 4,
            learning_rate: 0.01,
            ..ClassifierConfig::default()
        };
        let (a, losses) = train_classifier(enc.clone(), &imgs, &labels, &config).unwrap();
        let (b, _) = train_classifier(enc.clone(), &imgs, &labels, &config).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.encoder, enc);
        let head_only = extract_features(&a.encoder, &imgs).unwrap();
        let (final_loss, _, _) = bce_pass(&a.head, &head_only, &labels);
        assert!(final_loss < losses[0], "{final_loss} vs {}", losses[0]);
    }
}
