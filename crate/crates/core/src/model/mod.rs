//! Shallow U-Net mapping an image to its per-pixel sensitivity map.

pub mod checkpoint;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::enhancement::TransformMatrix;
use crate::error::{ensure, Error, Result};
use crate::image::GrayImage;
use crate::nn::{
    concat_channels, conv2d_backward, conv2d_forward, leaky_relu_backward_inplace,
    leaky_relu_inplace, maxpool2_backward, maxpool2_forward, sigmoid, softplus, split_channels,
    upsample2_backward, upsample2_forward, Conv2d, NamedTensor, ParamSet, Tensor,
};
use crate::seed;

/// Additive floor on the output head, keeping every alpha strictly positive.
pub const ALPHA_EPS: f64 = 1e-3;
pub const MAGIC: &[u8; 4] = b"DCE1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            base_channels: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.levels >= 1, Parameter, "U-Net needs at least one level");
        ensure!(
            self.base_channels >= 1,
            Parameter,
            "U-Net needs at least one base channel"
        );
        Ok(())
    }

    /// Required divisor of input width and height.
    pub fn stride(&self) -> usize {
        1 << self.levels
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Convolutions in parameter order with their names.
    fn layout(&self) -> Vec<(String, Conv2d)> {
        let mut convs = Vec::new();
        let mut cin = 1;
        for l in 0..self.levels {
            let c = self.width_at(l);
            convs.push((format!("enc{l}.conv_a"), Conv2d::new(cin, c, 3)));
            convs.push((format!("enc{l}.conv_b"), Conv2d::new(c, c, 3)));
            cin = c;
        }
        let mid = self.width_at(self.levels);
        convs.push(("mid.conv_a".into(), Conv2d::new(cin, mid, 3)));
        convs.push(("mid.conv_b".into(), Conv2d::new(mid, mid, 3)));
        for l in (0..self.levels).rev() {
            let c = self.width_at(l);
            convs.push((format!("dec{l}.up"), Conv2d::new(2 * c, c, 3)));
            convs.push((format!("dec{l}.conv_a"), Conv2d::new(2 * c, c, 3)));
            convs.push((format!("dec{l}.conv_b"), Conv2d::new(c, c, 3)));
        }
        convs.push(("head".into(), Conv2d::new(self.base_channels, 1, 1)));
        convs
    }

    fn enc(&self, l: usize, which: usize) -> usize {
        2 * l + which
    }

    fn mid(&self, which: usize) -> usize {
        2 * self.levels + which
    }

    fn dec(&self, l: usize, which: usize) -> usize {
        2 * self.levels + 2 + 3 * (self.levels - 1 - l) + which
    }

    fn head(&self) -> usize {
        5 * self.levels + 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: UNetConfig,
    pub tensors: ParamSet,
}

/// Metadata stored in the checkpoint config block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub note: String,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    unet: UNetConfig,
    meta: CheckpointMeta,
}

fn empty_tensors(convs: &[(String, Conv2d)]) -> ParamSet {
    let mut set = ParamSet::default();
    for (name, conv) in convs {
        set.push(NamedTensor::zeros(
            format!("{name}.weight"),
            vec![conv.cout, conv.cin, conv.k, conv.k],
        ));
        set.push(NamedTensor::zeros(format!("{name}.bias"), vec![conv.cout]));
    }
    set
}

/// Fan-in scaled uniform weights in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`,
/// zero biases, all values rounded to `f32`.
pub fn init_params(config: UNetConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let convs = config.layout();
    let mut tensors = empty_tensors(&convs);
    let mut rng = seed::rng(seed, &[seed::tag("unet-init")]);
    for (j, (_, conv)) in convs.iter().enumerate() {
        let bound = (6.0 / conv.fan_in() as f64).sqrt();
        for w in tensors.get_mut(2 * j) {
            *w = rng.gen_range(-bound..=bound);
        }
    }
    tensors.round_to_f32();
    Ok(ModelParams { config, tensors })
}

impl ModelParams {
    pub fn zeros(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            tensors: empty_tensors(&config.layout()),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.num_values()
    }

    fn conv(&self, j: usize) -> (&[f64], &[f64]) {
        (self.tensors.get(2 * j), self.tensors.get(2 * j + 1))
    }

    pub fn check_input(&self, width: usize, height: usize) -> Result<()> {
        let s = self.config.stride();
        ensure!(
            width % s == 0 && height % s == 0,
            Dimension,
            "input {width}x{height} is not divisible by {s}"
        );
        Ok(())
    }

    pub fn to_bytes(&self, meta: &CheckpointMeta) -> Vec<u8> {
        let block = ConfigBlock {
            unet: self.config,
            meta: meta.clone(),
        };
        let json = serde_json::to_string(&block).expect("config serializes");
        checkpoint::encode(MAGIC, &json, &self.tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, CheckpointMeta)> {
        let (json, tensors) = checkpoint::decode(MAGIC, bytes)?;
        Self::assemble(&json, tensors)
    }

    fn assemble(json: &str, tensors: ParamSet) -> Result<(Self, CheckpointMeta)> {
        let block: ConfigBlock = serde_json::from_str(json)
            .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        block.unet.validate()?;
        tensors.check_layout(&empty_tensors(&block.unet.layout()))?;
        Ok((
            Self {
                config: block.unet,
                tensors,
            },
            block.meta,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointMeta)> {
        let (json, tensors) = checkpoint::read_file(path.as_ref(), MAGIC)?;
        Self::assemble(&json, tensors)
    }
}

/// Activations kept from a forward pass for the reverse pass.
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    outputs: Vec<Tensor>,
    pool_args: Vec<Vec<usize>>,
    pool_shapes: Vec<(usize, usize, usize)>,
}

fn conv_act(params: &ModelParams, convs: &[(String, Conv2d)], j: usize, x: &Tensor) -> Tensor {
    let (w, b) = params.conv(j);
    let mut y = conv2d_forward(&convs[j].1, w, b, x);
    leaky_relu_inplace(&mut y);
    y
}

/// Forward pass on one `H x W` plane. Returns the alpha plane and the cache.
pub fn forward_plane(params: &ModelParams, plane: Tensor) -> (Vec<f64>, ForwardCache) {
    let cfg = params.config;
    let convs = cfg.layout();
    let n = convs.len();
    let mut inputs: Vec<Option<Tensor>> = vec![None; n];
    let mut outputs: Vec<Option<Tensor>> = vec![None; n];
    let mut pool_args = Vec::with_capacity(cfg.levels);
    let mut pool_shapes = Vec::with_capacity(cfg.levels);
    let mut skips = Vec::with_capacity(cfg.levels);

    let run = |j: usize, x: Tensor, inputs: &mut Vec<Option<Tensor>>, outputs: &mut Vec<Option<Tensor>>| {
        let y = conv_act(params, &convs, j, &x);
        inputs[j] = Some(x);
        outputs[j] = Some(y.clone());
        y
    };

    let mut x = plane;
    for l in 0..cfg.levels {
        let a = run(cfg.enc(l, 0), x, &mut inputs, &mut outputs);
        let b = run(cfg.enc(l, 1), a, &mut inputs, &mut outputs);
        pool_shapes.push((b.c, b.h, b.w));
        let (p, arg) = maxpool2_forward(&b);
        pool_args.push(arg);
        skips.push(b);
        x = p;
    }
    let a = run(cfg.mid(0), x, &mut inputs, &mut outputs);
    x = run(cfg.mid(1), a, &mut inputs, &mut outputs);
    for l in (0..cfg.levels).rev() {
        let u = upsample2_forward(&x);
        let v = run(cfg.dec(l, 0), u, &mut inputs, &mut outputs);
        let cat = concat_channels(&v, &skips[l]);
        let a = run(cfg.dec(l, 1), cat, &mut inputs, &mut outputs);
        x = run(cfg.dec(l, 2), a, &mut inputs, &mut outputs);
    }
    let head = cfg.head();
    let (w, b) = params.conv(head);
    let z = conv2d_forward(&convs[head].1, w, b, &x);
    let alphas = z.data.iter().map(|&v| softplus(v) + ALPHA_EPS).collect();
    inputs[head] = Some(x);
    outputs[head] = Some(z);
    (
        alphas,
        ForwardCache {
            inputs: inputs.into_iter().map(|t| t.expect("every conv ran")).collect(),
            outputs: outputs.into_iter().map(|t| t.expect("every conv ran")).collect(),
            pool_args,
            pool_shapes,
        },
    )
}

/// Reverse pass: parameter gradients for an upstream gradient on the alphas.
pub fn backward_plane(params: &ModelParams, cache: &ForwardCache, upstream: &[f64]) -> ParamSet {
    let cfg = params.config;
    let convs = cfg.layout();
    let mut grads = params.tensors.zeros_like();

    let back = |j: usize, g: &Tensor, act: bool, need_input: bool, grads: &mut ParamSet| -> Option<Tensor> {
        let mut g = g.clone();
        if act {
            leaky_relu_backward_inplace(&mut g, &cache.outputs[j]);
        }
        let (w, _) = params.conv(j);
        let (gw, gb) = {
            let (left, right) = grads.tensors.split_at_mut(2 * j + 1);
            (&mut left[2 * j].data, &mut right[0].data)
        };
        conv2d_backward(&convs[j].1, w, &cache.inputs[j], &g, gw, gb, need_input)
    };

    let head = cfg.head();
    let z = &cache.outputs[head];
    let gz = Tensor {
        c: 1,
        h: z.h,
        w: z.w,
        data: upstream
            .iter()
            .zip(&z.data)
            .map(|(g, &v)| g * sigmoid(v))
            .collect(),
    };
    let mut gx = back(head, &gz, false, true, &mut grads).expect("input grad requested");
    let mut skip_grads: Vec<Option<Tensor>> = vec![None; cfg.levels];
    for l in 0..cfg.levels {
        let ga = back(cfg.dec(l, 2), &gx, true, true, &mut grads).unwrap();
        let gcat = back(cfg.dec(l, 1), &ga, true, true, &mut grads).unwrap();
        let (gv, gskip) = split_channels(&gcat, cfg.width_at(l));
        skip_grads[l] = Some(gskip);
        let gu = back(cfg.dec(l, 0), &gv, true, true, &mut grads).unwrap();
        gx = upsample2_backward(&gu);
    }
    let ga = back(cfg.mid(1), &gx, true, true, &mut grads).unwrap();
    gx = back(cfg.mid(0), &ga, true, true, &mut grads).unwrap();
    for l in (0..cfg.levels).rev() {
        let mut gb = maxpool2_backward(&gx, &cache.pool_args[l], cache.pool_shapes[l]);
        let skip = skip_grads[l].take().unwrap();
        for (a, b) in gb.data.iter_mut().zip(&skip.data) {
            *a += b;
        }
        let ga = back(cfg.enc(l, 1), &gb, true, true, &mut grads).unwrap();
        match back(cfg.enc(l, 0), &ga, true, l > 0, &mut grads) {
            Some(g) => gx = g,
            None => break,
        }
    }
    grads
}

pub fn forward(params: &ModelParams, img: &GrayImage) -> Result<TransformMatrix> {
    params.check_input(img.width(), img.height())?;
    let plane = Tensor::from_plane(img.height(), img.width(), img.pixels().to_vec());
    let (alphas, _) = forward_plane(params, plane);
    TransformMatrix::new(img.width(), img.height(), alphas)
}

pub fn backward(params: &ModelParams, img: &GrayImage, upstream: &[f64]) -> Result<ParamSet> {
    params.check_input(img.width(), img.height())?;
    ensure!(
        upstream.len() == img.pixels().len(),
        Dimension,
        "upstream gradient has {} entries for a {}x{} image",
        upstream.len(),
        img.width(),
        img.height()
    );
    let plane = Tensor::from_plane(img.height(), img.width(), img.pixels().to_vec());
    let (_, cache) = forward_plane(params, plane);
    Ok(backward_plane(params, &cache, upstream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check_at, random_batch};

    fn image(seed: u64, side: usize) -> GrayImage {
        GrayImage::new(side, side, random_batch(1, side, side, seed).data().to_vec()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = UNetConfig::default();
        let a = init_params(cfg, 0).unwrap();
        assert_eq!(a, init_params(cfg, 0).unwrap());
        assert_ne!(a.tensors, init_params(cfg, 1).unwrap().tensors);
        for (j, (_, conv)) in cfg.layout().iter().enumerate() {
            let bound = (6.0 / conv.fan_in() as f64).sqrt();
            assert!(a.tensors.get(2 * j).iter().all(|w| w.abs() <= bound));
        }
        assert!(a.tensors.values().all(|v| f64::from(*v as f32) == *v));
    }

    #[test]
    fn output_shape_and_positivity() {
        let params = init_params(UNetConfig::default(), 3).unwrap();
        for side in [32, 64, 224] {
            let img = image(side as u64, side);
            let a = forward(&params, &img).unwrap();
            assert_eq!(a.dims(), (side, side));
            assert!(a.alphas().iter().all(|&v| v >= ALPHA_EPS));
        }
        let odd = GrayImage::constant(30, 32, 0.0).unwrap();
        assert!(matches!(forward(&params, &odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn zeroed_network_is_constant_softplus_of_bias() {
        let mut params = ModelParams::zeros(UNetConfig::default()).unwrap();
        // nonzero hidden biases must not leak through zero weights
        for t in params.tensors.tensors.iter_mut() {
            if t.name.ends_with(".bias") {
                t.data.iter_mut().for_each(|b| *b = 0.3);
            }
        }
        let head_bias = params.tensors.tensors.last_mut().unwrap();
        head_bias.data[0] = -0.7;
        let out = forward(&params, &image(1, 32)).unwrap();
        let expected = (1.0 + (-0.7f64).exp()).ln() + ALPHA_EPS;
        assert!(out.alphas().iter().all(|&a| (a - expected).abs() < 1e-15));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let params = init_params(UNetConfig::default(), 2).unwrap();
        let img = image(4, 16);
        let g = backward(&params, &img, &[0.0; 256]).unwrap();
        assert!(g.values().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = UNetConfig {
            levels: 2,
            base_channels: 4,
        };
        let mut params = init_params(cfg, 5).unwrap();
        params.tensors.values_mut().enumerate().for_each(|(i, v)| {
            if i % 3 == 0 {
                *v += 0.01;
            }
        });
        let img = image(6, 16);
        let upstream = random_batch(1, 16, 16, 7).data().to_vec();
        let grads = backward(&params, &img, &upstream).unwrap();
        assert_eq!(grads, backward(&params, &img, &upstream).unwrap());
        let flat = params.tensors.flatten();
        let mut rng = crate::seed::rng(8, &[]);
        let coords: Vec<usize> = (0..100).map(|_| rng.gen_range(0..flat.len())).collect();
        let objective = |v: &[f64]| -> f64 {
            let mut p = params.clone();
            p.tensors.set_flat(v);
            let a = forward(&p, &img).unwrap();
            a.alphas().iter().zip(&upstream).map(|(a, g)| a * g).sum()
        };
        fd_check_at(&flat, &grads.flatten(), &coords, 1e-4, 1e-4, objective);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let params = init_params(UNetConfig::default(), 11).unwrap();
        let meta = CheckpointMeta {
            seed: 11,
            epochs_run: 0,
            note: "init".into(),
        };
        let (back, meta_back) = ModelParams::from_bytes(&params.to_bytes(&meta)).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(back, params);
        let img = image(12, 32);
        assert_eq!(forward(&back, &img).unwrap(), forward(&params, &img).unwrap());
        let enc = checkpoint::encode(b"ENC1", "{}", &params.tensors);
        assert!(ModelParams::from_bytes(&enc).is_err());
    }
}
