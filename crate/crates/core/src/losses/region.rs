//! Region conflict loss on Gram matrices of tile-flattened images.
//!
//! With `FX`, `FY` the `N x M` tile matrices (`M = k^2`), the loss is
//! `||FX FX^T - FY FY^T||_F^2 / (4 N^2 M^2)`. The `N x N` Gram matrices are
//! never formed: writing `U = FX + FY`, `V = FX - FY`,
//! `FX FX^T - FY FY^T = (U V^T + V U^T) / 2`, whose squared norm reduces to
//! `(<U^T U, V^T V> + <V^T U, U^T V>) / 2` over `M x M` products. The
//! expression is exactly zero when `FY = +-FX`.

use crate::error::{ensure, Error, Result};
use crate::image::ImageBatch;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RowMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Dimension,
            "{} values for a {rows}x{cols} matrix",
            data.len()
        );
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Splits a plane into non-overlapping `k x k` tiles, one row per tile in
/// row-major tile order, pixels row-major inside each tile.
pub fn square_flatten(plane: &[f64], width: usize, height: usize, k: usize) -> Result<RowMatrix> {
    ensure!(
        plane.len() == width * height,
        Dimension,
        "plane has {} values for {width}x{height}",
        plane.len()
    );
    ensure!(
        k >= 1 && width % k == 0 && height % k == 0,
        Dimension,
        "kernel size {k} does not divide {width}x{height}"
    );
    let (tx, ty) = (width / k, height / k);
    let mut data = Vec::with_capacity(plane.len());
    for tile_y in 0..ty {
        for tile_x in 0..tx {
            for dy in 0..k {
                let start = (tile_y * k + dy) * width + tile_x * k;
                data.extend_from_slice(&plane[start..start + k]);
            }
        }
    }
    RowMatrix::new(tx * ty, k * k, data)
}

/// Inverse of [`square_flatten`] for gradients: scatters tile rows back.
fn unflatten_into(m: &RowMatrix, width: usize, k: usize, out: &mut [f64]) {
    let tx = width / k;
    for (t, row) in m.data.chunks_exact(k * k).enumerate() {
        let (tile_x, tile_y) = (t % tx, t / tx);
        for dy in 0..k {
            let start = (tile_y * k + dy) * width + tile_x * k;
            out[start..start + k].copy_from_slice(&row[dy * k..(dy + 1) * k]);
        }
    }
}

/// `M M^T`.
pub fn gram(m: &RowMatrix) -> Result<RowMatrix> {
    ensure!(m.rows >= 1 && m.cols >= 1, Parameter, "gram of an empty matrix");
    let n = m.rows;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        let ri = m.row(i);
        for j in i..n {
            let v: f64 = ri.iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    RowMatrix::new(n, n, g)
}

/// `A^T B` for two matrices sharing a row count.
fn cross(a: &RowMatrix, b: &RowMatrix) -> Vec<f64> {
    let (m, p) = (a.cols, b.cols);
    let mut out = vec![0.0; m * p];
    for r in 0..a.rows {
        let (ra, rb) = (a.row(r), b.row(r));
        for (i, &va) in ra.iter().enumerate() {
            let dst = &mut out[i * p..(i + 1) * p];
            for (d, &vb) in dst.iter_mut().zip(rb) {
                *d += va * vb;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

/// Accumulates `scale * A S` for `A` (`rows x m`) and square `S` (`m x m`).
fn mul_small_acc(a: &RowMatrix, s: &[f64], scale: f64, out: &mut [f64]) {
    let m = a.cols;
    for r in 0..a.rows {
        let ra = a.row(r);
        let dst = &mut out[r * m..(r + 1) * m];
        for (i, &v) in ra.iter().enumerate() {
            let coeff = scale * v;
            for (d, &sv) in dst.iter_mut().zip(&s[i * m..(i + 1) * m]) {
                *d += coeff * sv;
            }
        }
    }
}

/// Per-image loss and gradient with respect to `FY`.
fn tile_loss_grad(fx: &RowMatrix, fy: &RowMatrix) -> (f64, RowMatrix) {
    let (n, m) = (fx.rows as f64, fx.cols);
    let norm = 4.0 * n * n * (m * m) as f64;
    let u = RowMatrix {
        rows: fx.rows,
        cols: m,
        data: fx.data.iter().zip(&fy.data).map(|(a, b)| a + b).collect(),
    };
    let v = RowMatrix {
        rows: fx.rows,
        cols: m,
        data: fx.data.iter().zip(&fy.data).map(|(a, b)| a - b).collect(),
    };
    let utu = cross(&u, &u);
    let vtv = cross(&v, &v);
    let vtu = cross(&v, &u);
    let sq = 0.5 * (dot(&utu, &vtv) + dot(&vtu, &transpose(&vtu, m)));
    let value = (sq / norm).max(0.0);

    // dL/dFY = -4 (G_X - G_Y) FY / norm = -4 (FX S_xy - FY S_yy) / norm
    let sxy = cross(fx, fy);
    let syy = cross(fy, fy);
    let mut from_x = vec![0.0; fy.data.len()];
    let mut from_y = vec![0.0; fy.data.len()];
    mul_small_acc(fx, &sxy, 1.0, &mut from_x);
    mul_small_acc(fy, &syy, 1.0, &mut from_y);
    let grad = from_x
        .iter()
        .zip(&from_y)
        .map(|(a, b)| -4.0 * (a - b) / norm)
        .collect();
    (
        value,
        RowMatrix {
            rows: fy.rows,
            cols: m,
            data: grad,
        },
    )
}

/// Batch-averaged region conflict loss and its gradient with respect to `y`.
pub fn region_conflict_loss_grad(
    x: &ImageBatch,
    y: &ImageBatch,
    k: usize,
) -> Result<(f64, Vec<f64>)> {
    if !x.same_shape(y) {
        return Err(Error::Dimension(
            "original and enhanced batches differ in shape".into(),
        ));
    }
    let (w, h) = (x.width(), x.height());
    let plane = w * h;
    let count = x.count() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; y.data().len()];
    for (b, (xp, yp)) in x.planes().zip(y.planes()).enumerate() {
        let fx = square_flatten(xp, w, h, k)?;
        let fy = square_flatten(yp, w, h, k)?;
        let (v, mut g) = tile_loss_grad(&fx, &fy);
        total += v;
        g.data.iter_mut().for_each(|d| *d /= count);
        unflatten_into(&g, w, k, &mut grad[b * plane..(b + 1) * plane]);
    }
    Ok((total / count, grad))
}

pub fn region_conflict_loss(x: &ImageBatch, y: &ImageBatch, k: usize) -> Result<f64> {
    region_conflict_loss_grad(x, y, k).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check, random_batch};
    use proptest::prelude::*;

    /// Direct route through the explicit N x N Gram matrices.
    fn direct_loss(x: &ImageBatch, y: &ImageBatch, k: usize) -> f64 {
        let (w, h) = (x.width(), x.height());
        let mut total = 0.0;
        for (xp, yp) in x.planes().zip(y.planes()) {
            let gx = gram(&square_flatten(xp, w, h, k).unwrap()).unwrap();
            let gy = gram(&square_flatten(yp, w, h, k).unwrap()).unwrap();
            let n = gx.rows as f64;
            let m = (k * k) as f64;
            let sq: f64 = gx.data.iter().zip(&gy.data).map(|(a, b)| (a - b).powi(2)).sum();
            total += sq / (4.0 * n * n * m * m);
        }
        total / x.count() as f64
    }

    #[test]
    fn flatten_examples() {
        let ramp: Vec<f64> = (0..16).map(f64::from).collect();
        let f = square_flatten(&ramp, 4, 4, 2).unwrap();
        assert_eq!(
            f.data,
            vec![0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.]
        );
        let whole = square_flatten(&ramp, 4, 4, 4).unwrap();
        assert_eq!((whole.rows, whole.cols), (1, 16));
        assert_eq!(whole.data, ramp);
        let ones = square_flatten(&ramp, 4, 4, 1).unwrap();
        assert_eq!((ones.rows, ones.cols), (16, 1));
        assert_eq!(ones.data, ramp);
        assert!(matches!(square_flatten(&ramp, 4, 4, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn unflatten_inverts_flatten() {
        let x = random_batch(1, 12, 8, 3);
        let f = square_flatten(x.data(), 12, 8, 4).unwrap();
        let mut back = vec![0.0; 96];
        unflatten_into(&f, 12, 4, &mut back);
        assert_eq!(back, x.data());
    }

    #[test]
    fn gram_examples() {
        let id = RowMatrix::new(2, 2, vec![1., 0., 0., 1.]).unwrap();
        assert_eq!(gram(&id).unwrap(), id);
        let m = RowMatrix::new(2, 2, vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(gram(&m).unwrap().data, vec![5., 11., 11., 25.]);
    }

    #[test]
    fn zero_at_fixed_points() {
        let x = random_batch(3, 8, 8, 11);
        assert_eq!(region_conflict_loss(&x, &x, 2).unwrap(), 0.0);
        let neg = ImageBatch::new(3, 8, 8, x.data().iter().map(|v| -v).collect()).unwrap();
        assert_eq!(region_conflict_loss(&x, &neg, 2).unwrap(), 0.0);
        let (_, g) = region_conflict_loss_grad(&x, &x, 4).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_iff_grams_match() {
        for seed in 0..5 {
            let x = random_batch(1, 8, 8, seed);
            // same permutation of pixel positions inside every tile keeps the Gram matrix
            let perm = [3usize, 0, 2, 1];
            let fx = square_flatten(x.data(), 8, 8, 2).unwrap();
            let permuted = RowMatrix {
                rows: fx.rows,
                cols: 4,
                data: fx.data.chunks(4).flat_map(|r| perm.map(|p| r[p])).collect(),
            };
            let mut y = vec![0.0; 64];
            unflatten_into(&permuted, 8, 2, &mut y);
            let y = ImageBatch::single(8, 8, y).unwrap();
            let gx = gram(&fx).unwrap();
            let gy = gram(&square_flatten(y.data(), 8, 8, 2).unwrap()).unwrap();
            assert!(gx.data.iter().zip(&gy.data).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!(region_conflict_loss(&x, &y, 2).unwrap() < 1e-15);

            // permuting tile rows changes the Gram matrix and the loss
            let mut rows: Vec<&[f64]> = fx.data.chunks(4).collect();
            rows.rotate_left(1);
            let rot = RowMatrix {
                rows: fx.rows,
                cols: 4,
                data: rows.concat(),
            };
            let mut z = vec![0.0; 64];
            unflatten_into(&rot, 8, 2, &mut z);
            let z = ImageBatch::single(8, 8, z).unwrap();
            let gz = gram(&rot).unwrap();
            assert!(gx.data.iter().zip(&gz.data).any(|(a, b)| (a - b).abs() > 1e-6));
            assert!(region_conflict_loss(&x, &z, 2).unwrap() > 0.0);
        }
    }

    #[test]
    fn matches_direct_gram_route() {
        for seed in 0..5 {
            let x = random_batch(2, 8, 8, seed);
            let y = random_batch(2, 8, 8, seed + 40);
            for k in [1, 2, 4, 8] {
                let fast = region_conflict_loss(&x, &y, k).unwrap();
                let slow = direct_loss(&x, &y, k);
                assert!((fast - slow).abs() <= 1e-12 * slow.max(1e-12), "k={k}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let x = random_batch(1, 8, 8, seed);
            let y = random_batch(1, 8, 8, seed + 7);
            let (_, grad) = region_conflict_loss_grad(&x, &y, 2).unwrap();
            fd_check(y.data(), &grad, 1e-4, 1e-4, |v| {
                region_conflict_loss(&x, &ImageBatch::single(8, 8, v.to_vec()).unwrap(), 2).unwrap()
            });
        }
    }

    proptest! {
        #[test]
        fn gram_is_symmetric(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let b = random_batch(1, rows * cols, 1, seed);
            let m = RowMatrix::new(rows, cols, b.data().to_vec()).unwrap();
            let g = gram(&m).unwrap();
            for i in 0..rows {
                for j in 0..rows {
                    prop_assert_eq!(g.at(i, j), g.at(j, i));
                }
            }
        }

        #[test]
        fn loss_nonnegative(seed in any::<u64>()) {
            let x = random_batch(2, 8, 4, seed);
            let y = random_batch(2, 8, 4, !seed);
            prop_assert!(region_conflict_loss(&x, &y, 4).unwrap() >= 0.0);
        }
    }
}
