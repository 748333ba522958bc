use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{resize_bilinear, GrayImage};
use crate::model::checkpoint;
use crate::nn::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, global_avg_pool,
    global_avg_pool_backward, leaky_relu_backward_inplace, leaky_relu_inplace, maxpool2_backward,
    maxpool2_forward, Conv2d, NamedTensor, ParamSet, Tensor, LEAKY_SLOPE,
};
use crate::seed;

pub const ENCODER_MAGIC: &[u8; 4] = b"ENC1";

/// Convolutional stages (conv 3x3, leaky rectifier, max pool) followed by
/// global average pooling, plus a two-layer projection head used only while
/// pretraining.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub channels: Vec<usize>,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    /// Images are resized to `input_side x input_side` before encoding.
    pub input_side: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 64],
            projection_hidden: 64,
            projection_dim: 32,
            input_side: 224,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.channels.is_empty(), Config, "encoder needs at least one stage");
        ensure!(
            self.channels.iter().all(|&c| c >= 1) && self.projection_hidden >= 1 && self.projection_dim >= 1,
            Config,
            "encoder widths must be positive"
        );
        let stride = 1usize << self.channels.len();
        ensure!(
            self.input_side >= stride && self.input_side % stride == 0,
            Config,
            "input side {} must be a positive multiple of {stride}",
            self.input_side
        );
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    fn convs(&self) -> Vec<Conv2d> {
        let mut cin = 1;
        self.channels
            .iter()
            .map(|&c| {
                let conv = Conv2d::new(cin, c, 3);
                cin = c;
                conv
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub spec: EncoderSpec,
    pub tensors: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct EncoderBlock {
    spec: EncoderSpec,
}

fn uniform_fill(rng: &mut impl Rng, data: &mut [f64], fan_in: usize) {
    let bound = (6.0 / fan_in as f64).sqrt();
    data.iter_mut().for_each(|w| *w = rng.gen_range(-bound..=bound));
}

fn encoder_layout(spec: &EncoderSpec) -> ParamSet {
    let mut set = ParamSet::default();
    for (i, conv) in spec.convs().iter().enumerate() {
        set.push(NamedTensor::zeros(format!("stage{i}.weight"), vec![conv.cout, conv.cin, 3, 3]));
        set.push(NamedTensor::zeros(format!("stage{i}.bias"), vec![conv.cout]));
    }
    set
}

pub fn init_encoder(spec: &EncoderSpec, seed: u64) -> Result<EncoderParams> {
    spec.validate()?;
    let mut tensors = encoder_layout(spec);
    let mut rng = seed::rng(seed, &[seed::tag("encoder-init")]);
    for (i, conv) in spec.convs().iter().enumerate() {
        uniform_fill(&mut rng, tensors.get_mut(2 * i), conv.fan_in());
    }
    tensors.round_to_f32();
    Ok(EncoderParams {
        spec: spec.clone(),
        tensors,
    })
}

/// Projection head parameters: `proj0` (feature -> hidden) and `proj1`
/// (hidden -> projection).
pub fn init_head(spec: &EncoderSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let (f, h, d) = (spec.feature_dim(), spec.projection_hidden, spec.projection_dim);
    let mut set = ParamSet::default();
    set.push(NamedTensor::zeros("proj0.weight", vec![h, f]));
    set.push(NamedTensor::zeros("proj0.bias", vec![h]));
    set.push(NamedTensor::zeros("proj1.weight", vec![d, h]));
    set.push(NamedTensor::zeros("proj1.bias", vec![d]));
    let mut rng = seed::rng(seed, &[seed::tag("projection-init")]);
    uniform_fill(&mut rng, set.get_mut(0), f);
    uniform_fill(&mut rng, set.get_mut(2), h);
    set.round_to_f32();
    Ok(set)
}

impl EncoderParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_string(&EncoderBlock {
            spec: self.spec.clone(),
        })
        .expect("spec serializes");
        checkpoint::encode(ENCODER_MAGIC, &json, &self.tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (json, tensors) = checkpoint::decode(ENCODER_MAGIC, bytes)?;
        Self::assemble(&json, tensors)
    }

    fn assemble(json: &str, tensors: ParamSet) -> Result<Self> {
        let block: EncoderBlock = serde_json::from_str(json)
            .map_err(|e| Error::Checkpoint(format!("encoder config block: {e}")))?;
        block.spec.validate()?;
        tensors.check_layout(&encoder_layout(&block.spec))?;
        Ok(Self {
            spec: block.spec,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (json, tensors) = checkpoint::read_file(path.as_ref(), ENCODER_MAGIC)?;
        Self::assemble(&json, tensors)
    }
}

/// Resizes to the encoder input side when needed.
pub fn prepare_input(img: &GrayImage, spec: &EncoderSpec) -> Result<GrayImage> {
    if img.dims() == (spec.input_side, spec.input_side) {
        Ok(img.clone())
    } else {
        resize_bilinear(img, spec.input_side, spec.input_side)
    }
}

pub struct EncoderCache {
    inputs: Vec<Tensor>,
    activations: Vec<Tensor>,
    pool_args: Vec<Vec<usize>>,
    last_shape: (usize, usize, usize),
}

/// Feature vector of a prepared image.
pub fn encoder_forward(params: &EncoderParams, img: &GrayImage) -> Result<(Vec<f64>, EncoderCache)> {
    let side = params.spec.input_side;
    ensure!(
        img.dims() == (side, side),
        Dimension,
        "encoder expects {side}x{side} input, got {}x{}",
        img.width(),
        img.height()
    );
    let convs = params.spec.convs();
    let mut x = Tensor::from_plane(side, side, img.pixels().to_vec());
    let mut inputs = Vec::with_capacity(convs.len());
    let mut activations = Vec::with_capacity(convs.len());
    let mut pool_args = Vec::with_capacity(convs.len());
    for (i, conv) in convs.iter().enumerate() {
        let mut y = conv2d_forward(conv, params.tensors.get(2 * i), params.tensors.get(2 * i + 1), &x);
        leaky_relu_inplace(&mut y);
        let (p, arg) = maxpool2_forward(&y);
        inputs.push(x);
        activations.push(y);
        pool_args.push(arg);
        x = p;
    }
    let last_shape = (x.c, x.h, x.w);
    Ok((
        global_avg_pool(&x),
        EncoderCache {
            inputs,
            activations,
            pool_args,
            last_shape,
        },
    ))
}

/// Parameter gradients for an upstream gradient on the feature vector.
pub fn encoder_backward(params: &EncoderParams, cache: &EncoderCache, grad_features: &[f64]) -> ParamSet {
    let convs = params.spec.convs();
    let mut grads = params.tensors.zeros_like();
    let mut g = global_avg_pool_backward(grad_features, cache.last_shape);
    for i in (0..convs.len()).rev() {
        let act = &cache.activations[i];
        let mut gy = maxpool2_backward(&g, &cache.pool_args[i], (act.c, act.h, act.w));
        leaky_relu_backward_inplace(&mut gy, act);
        let (left, right) = grads.tensors.split_at_mut(2 * i + 1);
        let gx = conv2d_backward(
            &convs[i],
            params.tensors.get(2 * i),
            &cache.inputs[i],
            &gy,
            &mut left[2 * i].data,
            &mut right[0].data,
            i > 0,
        );
        match gx {
            Some(t) => g = t,
            None => break,
        }
    }
    grads
}

pub struct HeadCache {
    features: Vec<f64>,
    hidden: Vec<f64>,
}

pub fn head_forward(head: &ParamSet, features: &[f64]) -> (Vec<f64>, HeadCache) {
    let mut hidden = dense_forward(head.get(0), head.get(1), features);
    hidden.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE
        }
    });
    let z = dense_forward(head.get(2), head.get(3), &hidden);
    (
        z,
        HeadCache {
            features: features.to_vec(),
            hidden,
        },
    )
}

/// Accumulates head gradients into `grads` and returns the feature gradient.
pub fn head_backward(head: &ParamSet, cache: &HeadCache, grad_z: &[f64], grads: &mut ParamSet) -> Vec<f64> {
    let (first, second) = grads.tensors.split_at_mut(2);
    let (w1, b1) = second.split_at_mut(1);
    let mut gh = dense_backward(head.get(2), &cache.hidden, grad_z, &mut w1[0].data, &mut b1[0].data);
    for (g, &h) in gh.iter_mut().zip(&cache.hidden) {
        if h < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
    let (w0, b0) = first.split_at_mut(1);
    dense_backward(head.get(0), &cache.features, &gh, &mut w0[0].data, &mut b0[0].data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check_at, random_batch};

    fn small_spec() -> EncoderSpec {
        EncoderSpec {
            channels: vec![3, 4],
            projection_hidden: 5,
            projection_dim: 3,
            input_side: 8,
        }
    }

    fn image(seed: u64, side: usize) -> GrayImage {
        GrayImage::new(side, side, random_batch(1, side, side, seed).data().to_vec()).unwrap()
    }

    #[test]
    fn encoder_and_head_gradients_match_finite_differences() {
        let spec = small_spec();
        let enc = init_encoder(&spec, 1).unwrap();
        let head = init_head(&spec, 2).unwrap();
        let img = image(3, 8);
        let upstream = [0.3, -1.1, 0.7];
        let objective = |e: &ParamSet, h: &ParamSet| {
            let p = EncoderParams {
                spec: spec.clone(),
                tensors: e.clone(),
            };
            let (f, _) = encoder_forward(&p, &img).unwrap();
            let (z, _) = head_forward(h, &f);
            z.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        let (f, cache) = encoder_forward(&enc, &img).unwrap();
        let (_, hc) = head_forward(&head, &f);
        let mut gh = head.zeros_like();
        let gf = head_backward(&head, &hc, &upstream, &mut gh);
        let ge = encoder_backward(&enc, &cache, &gf);

        let flat_e = enc.tensors.flatten();
        let all: Vec<usize> = (0..flat_e.len()).collect();
        fd_check_at(&flat_e, &ge.flatten(), &all, 1e-5, 1e-4, |v| {
            let mut t = enc.tensors.clone();
            t.set_flat(v);
            objective(&t, &head)
        });
        let flat_h = head.flatten();
        let all: Vec<usize> = (0..flat_h.len()).collect();
        fd_check_at(&flat_h, &gh.flatten(), &all, 1e-5, 1e-4, |v| {
            let mut t = head.clone();
            t.set_flat(v);
            objective(&enc.tensors, &t)
        });
    }

    #[test]
    fn default_encoder_shapes_and_checkpoint() {
        let spec = EncoderSpec::default();
        let enc = init_encoder(&spec, 0).unwrap();
        let img = prepare_input(&image(1, 64), &spec).unwrap();
        let (f, _) = encoder_forward(&enc, &img).unwrap();
        assert_eq!(f.len(), 64);
        let back = EncoderParams::from_bytes(&enc.to_bytes()).unwrap();
        assert_eq!(back, enc);
        assert!(enc.tensors.tensors.iter().all(|t| !t.name.starts_with("proj")));
        assert!(EncoderParams::from_bytes(&checkpoint::encode(b"DCE1", "{}", &enc.tensors)).is_err());
    }

    #[test]
    fn spec_validation() {
        let bad = EncoderSpec {
            input_side: 100,
            ..EncoderSpec::default()
        };
        assert!(bad.validate().is_err());
        assert!(EncoderSpec::default().validate().is_ok());
    }
}
