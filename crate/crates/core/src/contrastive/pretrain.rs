use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::{
    encoder_backward, encoder_forward, head_backward, head_forward, init_encoder, init_head,
    EncoderParams, EncoderSpec,
};
use super::{ntxent_batch_loss_grad, two_views, EmbeddingBatch, DEFAULT_TAU};
use crate::enhancement::CurveShift;
use crate::error::{ensure, Error, Result};
use crate::image::{AugmentConfig, GrayImage};
use crate::model::ModelParams;
use crate::nn::ParamSet;
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::trainer::{enhance_image, BATCH_SIZES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_decay_lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub tau: f64,
    /// Crop and rotation ranges; the output size follows the encoder input.
    pub augment: AugmentConfig,
    pub force: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            lr_decay_lambda: 0.95,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            tau: DEFAULT_TAU,
            augment: AugmentConfig::default(),
            force: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ranged = [
            ("learning_rate", self.learning_rate, 1e-6, 1e-3),
            ("weight_decay", self.weight_decay, 1e-5, 1e-2),
            ("lr_decay_lambda", self.lr_decay_lambda, 0.6, 1.0),
        ];
        for (name, v, lo, hi) in ranged {
            ensure!(v.is_finite() && v >= 0.0, Config, "{name} must be finite and non-negative");
            ensure!(
                self.force || (lo..=hi).contains(&v),
                Config,
                "{name} = {v} outside [{lo}, {hi}]; pass force to override"
            );
        }
        ensure!(self.learning_rate > 0.0, Config, "learning_rate must be positive");
        ensure!(self.batch_size >= 2, Config, "contrastive batches need at least 2 images");
        ensure!(
            self.force || BATCH_SIZES.contains(&self.batch_size),
            Config,
            "batch_size {} not one of {BATCH_SIZES:?}; pass force to override",
            self.batch_size
        );
        ensure!(self.tau > 0.0 && self.tau.is_finite(), Config, "tau must be positive");
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    /// Loss on fixed evaluation views before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Splits `order` into batches of at least two images.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let n = out.len();
        let start = order.len() - out[n - 2].len() - 1;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

struct Views<'a> {
    images: &'a [GrayImage],
    augment: AugmentConfig,
}

impl Views<'_> {
    fn pair(&self, idx: usize, stream: u64) -> Result<(GrayImage, GrayImage)> {
        two_views(&self.images[idx], seed::derive(stream, &[idx as u64]), &self.augment)
    }
}

/// Loss and, when `train` is set, gradients of encoder and head over one batch.
fn batch_pass(
    enc: &EncoderParams,
    head: &ParamSet,
    views: &Views,
    batch: &[usize],
    stream: u64,
    tau: f64,
    train: bool,
) -> Result<(f64, Option<(ParamSet, ParamSet)>)> {
    let forwards = batch
        .par_iter()
        .map(|&i| {
            let (a, b) = views.pair(i, stream)?;
            let fa = encoder_forward(enc, &a)?;
            let fb = encoder_forward(enc, &b)?;
            let ha = head_forward(head, &fa.0);
            let hb = head_forward(head, &fb.0);
            Ok([(fa.1, ha), (fb.1, hb)])
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = forwards
        .iter()
        .flat_map(|pair| pair.iter().map(|(_, (z, _))| z.clone()))
        .collect();
    let z = EmbeddingBatch::from_rows(&rows)?;
    let (loss, grad_z) = ntxent_batch_loss_grad(&z, tau)?;
    if !train {
        return Ok((loss, None));
    }
    let d = z.dim();
    let flat: Vec<_> = forwards.iter().flatten().collect();
    let parts: Vec<(ParamSet, ParamSet)> = flat
        .par_iter()
        .enumerate()
        .map(|(r, (enc_cache, (_, head_cache)))| {
            let mut gh = head.zeros_like();
            let gf = head_backward(head, head_cache, &grad_z[r * d..(r + 1) * d], &mut gh);
            (encoder_backward(enc, enc_cache, &gf), gh)
        })
        .collect();
    let (ge, gh): (Vec<ParamSet>, Vec<ParamSet>) = parts.into_iter().unzip();
    Ok((
        loss,
        Some((
            ParamSet::sum_ordered(&ge).expect("non-empty"),
            ParamSet::sum_ordered(&gh).expect("non-empty"),
        )),
    ))
}

fn eval_loss(enc: &EncoderParams, head: &ParamSet, views: &Views, config: &PretrainConfig) -> Result<f64> {
    let order: Vec<usize> = (0..views.images.len()).collect();
    let stream = seed::derive(config.seed, &[seed::tag("eval-views")]);
    let mut total = 0.0;
    let groups = batches(&order, config.batch_size);
    for b in &groups {
        total += batch_pass(enc, head, views, b, stream, config.tau, false)?.0;
    }
    Ok(total / groups.len() as f64)
}

/// Contrastive pretraining. When `enhancer` is given every image is enhanced
/// before augmentation. The projection head is dropped from the result.
pub fn pretrain_encoder(
    corpus: &[GrayImage],
    spec: &EncoderSpec,
    config: &PretrainConfig,
    enhancer: Option<&ModelParams>,
) -> Result<(EncoderParams, PretrainReport)> {
    ensure!(corpus.len() >= 2, Parameter, "contrastive pretraining needs at least 2 images");
    spec.validate()?;
    config.validate()?;
    let enhanced;
    let images = match enhancer {
        Some(p) => {
            enhanced = corpus
                .par_iter()
                .map(|img| enhance_image(p, img, CurveShift::default()))
                .collect::<Result<Vec<_>>>()?;
            &enhanced[..]
        }
        None => corpus,
    };
    let views = Views {
        images,
        augment: AugmentConfig {
            output_width: spec.input_side,
            output_height: spec.input_side,
            ..config.augment.clone()
        },
    };
    let mut enc = init_encoder(spec, config.seed)?;
    let mut head = init_head(spec, config.seed)?;
    let adam = AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let mut opt_enc = Adam::new(adam, &enc.tensors);
    let mut opt_head = Adam::new(adam, &head);
    let initial_loss = eval_loss(&enc, &head, &views, config)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::rng(config.seed, &[seed::tag("contrastive-shuffle"), epoch as u64]));
        let lr = config.learning_rate * config.lr_decay_lambda.powi(epoch as i32);
        let groups = batches(&order, config.batch_size);
        let mut sum = 0.0;
        for (b, batch) in groups.iter().enumerate() {
            let stream = seed::derive(config.seed, &[seed::tag("train-views"), epoch as u64, b as u64]);
            let (loss, grads) = batch_pass(&enc, &head, &views, batch, stream, config.tau, true)?;
            let (ge, gh) = grads.expect("training pass returns gradients");
            if !(loss.is_finite() && ge.all_finite() && gh.all_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    reason: "non-finite contrastive loss or gradient".into(),
                });
            }
            opt_enc.step(&mut enc.tensors, &ge, lr);
            opt_head.step(&mut head, &gh, lr);
            sum += loss;
        }
        let mean = sum / groups.len() as f64;
        log::info!("contrastive epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    let final_loss = eval_loss(&enc, &head, &views, config)?;
    Ok((
        enc,
        PretrainReport {
            epoch_losses,
            initial_loss,
            final_loss,
        },
    ))
}
