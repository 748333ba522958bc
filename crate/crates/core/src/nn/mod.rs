//! Minimal CPU layers with hand-written reverse passes, shared by the
//! enhancement U-Net and the contrastive encoder.
//!
//! Activations are single-sample `C x H x W` tensors; batching is done by
//! mapping over samples and reducing parameter gradients in a fixed order.

mod conv;
mod params;

pub use conv::{conv2d_backward, conv2d_forward, Conv2d};
pub use params::{NamedTensor, ParamSet};

/// Dense `C x H x W` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_plane(h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), h * w);
        Self { c: 1, h, w, data }
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }
}

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Gradient through a leaky rectifier given its output (sign is preserved).
pub fn leaky_relu_backward_inplace(grad: &mut Tensor, output: &Tensor) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// 2x2 max pooling, stride 2. Returns the pooled tensor and, per output
/// element, the flat index of the winning input element.
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    let mut arg = vec![0usize; x.c * h2 * w2];
    let plane = x.plane_len();
    for c in 0..x.c {
        let base = c * plane;
        for y in 0..h2 {
            for xx in 0..w2 {
                let i0 = base + 2 * y * x.w + 2 * xx;
                let cand = [i0, i0 + 1, i0 + x.w, i0 + x.w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = c * h2 * w2 + y * w2 + xx;
                out.data[o] = x.data[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad_out: &Tensor, arg: &[usize], input_shape: (usize, usize, usize)) -> Tensor {
    let (c, h, w) = input_shape;
    let mut g = Tensor::zeros(c, h, w);
    for (&i, &v) in arg.iter().zip(&grad_out.data) {
        g.data[i] += v;
    }
    g
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h2 {
            let srow = &src[(y / 2) * x.w..(y / 2 + 1) * x.w];
            let drow = &mut dst[y * w2..(y + 1) * w2];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (h, w) = (grad_out.h / 2, grad_out.w / 2);
    let mut g = Tensor::zeros(grad_out.c, h, w);
    for c in 0..grad_out.c {
        let src = grad_out.channel(c);
        let dst = g.channel_mut(c);
        for y in 0..grad_out.h {
            for x in 0..grad_out.w {
                dst[(y / 2) * w + x / 2] += src[y * grad_out.w + x];
            }
        }
    }
    g
}

/// Channel concatenation `[a; b]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert!(a.h == b.h && a.w == b.w);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let cut = first * t.plane_len();
    (
        Tensor {
            c: first,
            h: t.h,
            w: t.w,
            data: t.data[..cut].to_vec(),
        },
        Tensor {
            c: t.c - first,
            h: t.h,
            w: t.w,
            data: t.data[cut..].to_vec(),
        },
    )
}

pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let n = x.plane_len() as f64;
    (0..x.c).map(|c| x.channel(c).iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(grad: &[f64], shape: (usize, usize, usize)) -> Tensor {
    let (c, h, w) = shape;
    let n = (h * w) as f64;
    let mut t = Tensor::zeros(c, h, w);
    for (ch, &g) in grad.iter().enumerate() {
        t.channel_mut(ch).iter_mut().for_each(|v| *v = g / n);
    }
    t
}

/// Fully connected layer `y = W x + b`, `W` stored `out x in` row-major.
pub fn dense_forward(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            b + weight[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
        })
        .collect()
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn dense_backward(
    weight: &[f64],
    x: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Vec<f64> {
    let n_in = x.len();
    let mut gx = vec![0.0; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        grad_bias[o] += g;
        let row = &weight[o * n_in..(o + 1) * n_in];
        let grow = &mut grad_weight[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += g * x[i];
            gx[i] += g * row[i];
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_and_upsample_shapes() {
        let t = Tensor {
            c: 2,
            h: 4,
            w: 4,
            data: (0..32).map(f64::from).collect(),
        };
        let (p, arg) = maxpool2_forward(&t);
        assert_eq!((p.c, p.h, p.w), (2, 2, 2));
        assert_eq!(p.data[..4], [5.0, 7.0, 13.0, 15.0]);
        let g = maxpool2_backward(&p, &arg, (2, 4, 4));
        assert_eq!(g.data.iter().filter(|&&v| v != 0.0).count(), 8);
        let u = upsample2_forward(&p);
        assert_eq!((u.h, u.w), (4, 4));
        assert_eq!(u.data[..4], [5.0, 5.0, 7.0, 7.0]);
        let back = upsample2_backward(&u);
        assert_eq!(back.data[0], 20.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
