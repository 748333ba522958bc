//! Stride-1 "same" convolutions with 1x1 or 3x3 kernels.

use std::cell::RefCell;

use super::Tensor;

/// Shape of a convolution; weights are `cout x cin x k x k` row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are supported");
        Self { cin, cout, k }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Matrix operand: slice plus row and column strides.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    fn new(data: &'a [f64], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }
}

/// `c = beta * c + a b` with `a: m x k`, `b: k x n`; `c` has row stride `rsc`.
fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64], rsc: usize) {
    let last = |mat: Mat, rows: usize, cols: usize| (rows - 1) * mat.rs + (cols - 1) * mat.cs;
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (last(a, m, k) < a.data.len() && last(b, k, n) < b.data.len()));
    assert!((m - 1) * rsc + n <= c.len());
    // SAFETY: the asserts above bound every index addressed through the given
    // shapes and strides, and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Byte budget for one unfolded row band; keeps the band cache-resident.
const BAND_BYTES: usize = 256 * 1024;

fn band_rows(kdim: usize, w: usize, h: usize) -> usize {
    (BAND_BYTES / (8 * kdim * w)).clamp(1, h)
}

thread_local! {
    static BAND: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

fn with_band<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    BAND.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Maps output column offset `kx` onto matching source/destination ranges of
/// a row of width `w`: `dst[d] <-> src[s]`.
fn tap_ranges(kx: usize, w: usize) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    match kx {
        0 if w > 1 => Some((1..w, 0..w - 1)),
        1 => Some((0..w, 0..w)),
        2 if w > 1 => Some((0..w - 1, 1..w)),
        _ => None,
    }
}

/// Unfolds the 3x3 zero-padded neighbourhoods of output rows `y0..y0+rows`:
/// band row `(i, ky, kx)`, column `(y - y0, x)`.
fn im2col3_band(x: &Tensor, y0: usize, rows: usize, band: &mut [f64]) {
    let (h, w) = (x.h, x.w);
    let n = rows * w;
    for i in 0..x.c {
        let src = x.channel(i);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut band[(i * 9 + ky * 3 + kx) * n..][..n];
                for r in 0..rows {
                    let drow = &mut row[r * w..][..w];
                    let sy = (y0 + r + ky).wrapping_sub(1);
                    match tap_ranges(kx, w) {
                        Some((d, s)) if sy < h => {
                            let srow = &src[sy * w..][..w];
                            drow[d.clone()].copy_from_slice(&srow[s]);
                            drow[..d.start].fill(0.0);
                            drow[d.end..].fill(0.0);
                        }
                        _ => drow.fill(0.0),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3_band`], accumulating into `dst`.
fn col2im3_band(band: &[f64], y0: usize, rows: usize, dst: &mut Tensor) {
    let (h, w) = (dst.h, dst.w);
    let n = rows * w;
    for i in 0..dst.c {
        let out = dst.channel_mut(i);
        for ky in 0..3 {
            for kx in 0..3 {
                let Some((d, s)) = tap_ranges(kx, w) else {
                    continue;
                };
                let row = &band[(i * 9 + ky * 3 + kx) * n..][..n];
                for r in 0..rows {
                    let sy = (y0 + r + ky).wrapping_sub(1);
                    if sy >= h {
                        continue;
                    }
                    let orow = &mut out[sy * w..][..w];
                    let crow = &row[r * w..][..w];
                    for (o, c) in orow[s.clone()].iter_mut().zip(&crow[d.clone()]) {
                        *o += c;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(conv: &Conv2d, weight: &[f64], bias: &[f64], x: &Tensor) -> Tensor {
    debug_assert_eq!(x.c, conv.cin);
    debug_assert_eq!(weight.len(), conv.weight_len());
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let mut out = Tensor::zeros(conv.cout, h, w);
    for (o, &b) in bias.iter().enumerate() {
        out.channel_mut(o).fill(b);
    }
    let kdim = conv.fan_in();
    let wmat = Mat::new(weight, kdim, 1);
    if conv.k == 1 {
        gemm(conv.cout, kdim, hw, wmat, Mat::new(&x.data, hw, 1), 1.0, &mut out.data, hw);
        return out;
    }
    let step = band_rows(kdim, w, h);
    with_band(kdim * step * w, |band| {
        for y0 in (0..h).step_by(step) {
            let rows = step.min(h - y0);
            let n = rows * w;
            im2col3_band(x, y0, rows, &mut band[..kdim * n]);
            gemm(
                conv.cout,
                kdim,
                n,
                wmat,
                Mat::new(band, n, 1),
                1.0,
                &mut out.data[y0 * w..],
                hw,
            );
        }
    });
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input_grad` is set.
pub fn conv2d_backward(
    conv: &Conv2d,
    weight: &[f64],
    x: &Tensor,
    grad_out: &Tensor,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let kdim = conv.fan_in();
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out.channel(o).iter().sum::<f64>();
    }
    let mut gin = need_input_grad.then(|| Tensor::zeros(conv.cin, h, w));
    // weight transposed: kdim x cout
    let wt = Mat::new(weight, 1, kdim);
    if conv.k == 1 {
        let gy = Mat::new(&grad_out.data, hw, 1);
        // dW += dY . X^T
        gemm(conv.cout, hw, kdim, gy, Mat::new(&x.data, 1, hw), 1.0, grad_weight, kdim);
        if let Some(g) = gin.as_mut() {
            gemm(kdim, conv.cout, hw, wt, gy, 0.0, &mut g.data, hw);
        }
        return gin;
    }
    let step = band_rows(kdim, w, h);
    with_band(kdim * step * w, |band| {
        for y0 in (0..h).step_by(step) {
            let rows = step.min(h - y0);
            let n = rows * w;
            let band = &mut band[..kdim * n];
            let gy = Mat::new(&grad_out.data[y0 * w..], hw, 1);
            im2col3_band(x, y0, rows, band);
            // dW += dY_band . band^T
            gemm(conv.cout, n, kdim, gy, Mat::new(band, 1, n), 1.0, grad_weight, kdim);
            if let Some(g) = gin.as_mut() {
                // band gradient = W^T . dY_band, then fold back
                gemm(kdim, conv.cout, n, wt, gy, 0.0, band, n);
                col2im3_band(band, y0, rows, g);
            }
        }
    });
    gin
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Direct 7-loop convolution used as the reference.
    fn naive(conv: &Conv2d, weight: &[f64], bias: &[f64], x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(conv.cout, x.h, x.w);
        let pad = (conv.k / 2) as isize;
        for o in 0..conv.cout {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = bias[o];
                    for i in 0..conv.cin {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wv = weight[((o * conv.cin + i) * conv.k + ky) * conv.k + kx];
                                acc += wv * x.data[(i * x.h + sy as usize) * x.w + sx as usize];
                            }
                        }
                    }
                    out.data[(o * x.h + y) * x.w + xx] = acc;
                }
            }
        }
        out
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::seed::rng(seed, &[]);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn forward_matches_naive() {
        // the last two shapes split into several row bands
        for (cin, k, h, w) in [
            (3, 3, 5, 7),
            (3, 3, 1, 4),
            (3, 3, 6, 1),
            (3, 1, 4, 4),
            (16, 3, 7, 300),
            (8, 3, 9, 150),
        ] {
            assert!(cin < 16 || band_rows(cin * 9, w, h) < h);
            let conv = Conv2d::new(cin, 2, k);
            let x = Tensor {
                c: cin,
                h,
                w,
                data: random(cin * h * w, 1),
            };
            let wt = random(conv.weight_len(), 2);
            let b = random(2, 3);
            let fast = conv2d_forward(&conv, &wt, &b, &x);
            let slow = naive(&conv, &wt, &b, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <g, conv(x)> is linear in x and w: its gradients are the backward outputs
        for (cin, k, h, w) in [(2, 1, 5, 6), (2, 3, 5, 6), (16, 3, 5, 300)] {
            let conv = Conv2d::new(cin, 3, k);
            let x = Tensor {
                c: cin,
                h,
                w,
                data: random(cin * h * w, 4),
            };
            let wt = random(conv.weight_len(), 5);
            let zero_b = vec![0.0; 3];
            let g = Tensor {
                c: 3,
                h,
                w,
                data: random(3 * h * w, 6),
            };
            let mut gw = vec![0.0; conv.weight_len()];
            let mut gb = vec![0.0; 3];
            let gin = conv2d_backward(&conv, &wt, &x, &g, &mut gw, &mut gb, true).unwrap();
            let inner = |x: &Tensor, wt: &[f64]| -> f64 {
                conv2d_forward(&conv, wt, &zero_b, x)
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let base = inner(&x, &wt);
            // linear: gradient dotted with the input reproduces the value
            let via_x: f64 = gin.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
            let via_w: f64 = gw.iter().zip(&wt).map(|(a, b)| a * b).sum();
            let tol = 1e-12 * (x.data.len() as f64).max(1e2);
            assert!((via_x - base).abs() < tol);
            assert!((via_w - base).abs() < tol);
            let gsum: f64 = g.data.iter().sum();
            assert!(gb.iter().all(|&v| v != 0.0));
            assert!((gb.iter().sum::<f64>() - gsum).abs() < tol);
            // per-coordinate check on input gradient, including band edges
            for idx in [0, 7, 13, w, 2 * w - 1, 3 * w + 1, cin * h * w - 1] {
                let mut xp = x.clone();
                xp.data[idx] += 1.0;
                assert!((inner(&xp, &wt) - base - gin.data[idx]).abs() < tol);
            }
        }
    }
}
