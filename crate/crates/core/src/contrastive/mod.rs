//! NT-Xent contrastive objective, two-view augmentation, the small
//! convolutional encoder and its self-supervised pretraining.

mod encoder;
mod pretrain;

pub use encoder::{
    encoder_backward, encoder_forward, head_backward, head_forward, init_encoder, init_head,
    prepare_input, EncoderCache, EncoderParams, EncoderSpec, HeadCache, ENCODER_MAGIC,
};
pub use pretrain::{pretrain_encoder, PretrainConfig, PretrainReport};

use crate::error::{ensure, Result};
use crate::image::{augment, AugmentConfig, GrayImage};
use crate::seed;

/// Default NT-Xent temperature.
pub const DEFAULT_TAU: f64 = 0.5;

/// `2N` embeddings where rows `2k` and `2k + 1` are the two views of source
/// image `k` (zero-based).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            rows >= 2 && rows % 2 == 0,
            Dimension,
            "embedding batch needs an even number of rows, got {rows}"
        );
        ensure!(dim >= 1, Dimension, "embedding dimension must be positive");
        ensure!(
            data.len() == rows * dim,
            Dimension,
            "{} values supplied for {rows}x{dim} embeddings",
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Parameter,
            "embeddings must be finite"
        );
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == dim),
            Dimension,
            "embedding rows differ in length"
        );
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn partner(i: usize) -> usize {
    i ^ 1
}

/// Unit rows, their norms and the scaled similarity matrix `u_i . u_k / tau`.
fn similarities(z: &EmbeddingBatch, tau: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    ensure!(tau > 0.0 && tau.is_finite(), Parameter, "temperature must be positive, got {tau}");
    let (n, d) = (z.rows, z.dim);
    let mut unit = vec![0.0; n * d];
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let row = z.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!(norm > 0.0, Degenerate, "embedding row {i} has zero norm");
        norms[i] = norm;
        for (u, v) in unit[i * d..(i + 1) * d].iter_mut().zip(row) {
            *u = v / norm;
        }
    }
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for k in i..n {
            let dot: f64 = unit[i * d..(i + 1) * d]
                .iter()
                .zip(&unit[k * d..(k + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            s[i * n + k] = dot / tau;
            s[k * n + i] = dot / tau;
        }
    }
    Ok((unit, norms, s))
}

/// Row-wise softmax over `k != i` and the log of its normalizer.
fn row_softmax(s: &[f64], n: usize, i: usize) -> (Vec<f64>, f64) {
    let row = &s[i * n..(i + 1) * n];
    let max = (0..n).filter(|&k| k != i).map(|k| row[k]).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = (0..n)
        .map(|k| if k == i { 0.0 } else { (row[k] - max).exp() })
        .collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    (p, max + sum.ln())
}

/// `-log( exp(s_ij) / sum_{k != i} exp(s_ik) )` with cosine similarities.
pub fn ntxent_pair_loss(z: &EmbeddingBatch, i: usize, j: usize, tau: f64) -> Result<f64> {
    ensure!(
        i != j && i < z.rows && j < z.rows,
        Parameter,
        "pair indices ({i}, {j}) invalid for {} rows",
        z.rows
    );
    let (_, _, s) = similarities(z, tau)?;
    let (_, log_norm) = row_softmax(&s, z.rows, i);
    Ok((log_norm - s[i * z.rows + j]).max(0.0))
}

/// Mean of the pair loss over both orderings of every positive pair.
pub fn ntxent_batch_loss(z: &EmbeddingBatch, tau: f64) -> Result<f64> {
    Ok(ntxent_batch_loss_grad(z, tau)?.0)
}

/// Batch loss and its gradient with respect to the raw embeddings.
pub fn ntxent_batch_loss_grad(z: &EmbeddingBatch, tau: f64) -> Result<(f64, Vec<f64>)> {
    let (unit, norms, s) = similarities(z, tau)?;
    let (n, d) = (z.rows, z.dim);
    let mut probs = vec![0.0; n * n];
    let mut loss = 0.0;
    for i in 0..n {
        let (p, log_norm) = row_softmax(&s, n, i);
        loss += (log_norm - s[i * n + partner(i)]).max(0.0);
        probs[i * n..(i + 1) * n].copy_from_slice(&p);
    }
    loss /= n as f64;
    // coefficient of u_k in dL/du_i
    let scale = 1.0 / (n as f64 * tau);
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        let mut gu = vec![0.0; d];
        for k in (0..n).filter(|&k| k != i) {
            let mut c = probs[i * n + k] + probs[k * n + i];
            if k == partner(i) {
                c -= 2.0;
            }
            for (g, u) in gu.iter_mut().zip(&unit[k * d..(k + 1) * d]) {
                *g += c * scale * u;
            }
        }
        let ui = &unit[i * d..(i + 1) * d];
        let radial: f64 = gu.iter().zip(ui).map(|(g, u)| g * u).sum();
        for ((g, &gv), &u) in grad[i * d..(i + 1) * d].iter_mut().zip(&gu).zip(ui) {
            *g = (gv - radial * u) / norms[i];
        }
    }
    Ok((loss, grad))
}

/// Two independent augmentations with seeds derived from `(seed, view)`.
pub fn two_views(img: &GrayImage, seed: u64, config: &AugmentConfig) -> Result<(GrayImage, GrayImage)> {
    let view = |v: u64| augment(img, seed::derive(seed, &[seed::tag("view"), v]), config);
    Ok((view(0)?, view(1)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check, random_batch};

    fn batch(rows: usize, dim: usize, seed: u64) -> EmbeddingBatch {
        EmbeddingBatch::new(rows, dim, random_batch(1, rows, dim, seed).data().to_vec()).unwrap()
    }

    #[test]
    fn single_pair_is_zero() {
        let z = EmbeddingBatch::new(2, 3, vec![1.0, 2.0, 3.0, -4.0, 0.5, 2.0]).unwrap();
        assert_eq!(ntxent_pair_loss(&z, 0, 1, 0.5).unwrap(), 0.0);
        assert_eq!(ntxent_batch_loss(&z, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn identical_embeddings_give_ln3() {
        let z = EmbeddingBatch::new(4, 2, [0.3, -0.7].repeat(4)).unwrap();
        for tau in [0.1, 0.5, 2.0] {
            assert!((ntxent_batch_loss(&z, tau).unwrap() - 3f64.ln()).abs() < 1e-12);
            assert!((ntxent_pair_loss(&z, 2, 3, tau).unwrap() - 1.098_612_288_668_11).abs() < 1e-12);
        }
    }

    #[test]
    fn rescaling_and_view_swap_invariance() {
        let z = batch(8, 16, 3);
        let base = ntxent_batch_loss(&z, 0.5).unwrap();
        let mut scaled = z.data().to_vec();
        scaled[16..32].iter_mut().for_each(|v| *v *= 7.5);
        let zs = EmbeddingBatch::new(8, 16, scaled).unwrap();
        assert!((ntxent_batch_loss(&zs, 0.5).unwrap() - base).abs() < 1e-12);
        let swapped: Vec<Vec<f64>> = (0..8).map(|i| z.row(partner(i)).to_vec()).collect();
        let zw = EmbeddingBatch::from_rows(&swapped).unwrap();
        assert!((ntxent_batch_loss(&zw, 0.5).unwrap() - base).abs() < 1e-12);
        for i in 0..8 {
            assert!(ntxent_pair_loss(&z, i, partner(i), 0.5).unwrap() >= 0.0);
        }
    }

    #[test]
    fn errors() {
        let z = EmbeddingBatch::new(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(ntxent_batch_loss(&z, 0.5), Err(crate::Error::Degenerate(_))));
        let ok = batch(2, 2, 1);
        assert!(matches!(ntxent_batch_loss(&ok, 0.0), Err(crate::Error::Parameter(_))));
        assert!(EmbeddingBatch::new(3, 1, vec![1.0; 3]).is_err());
        assert!(ntxent_pair_loss(&ok, 1, 1, 0.5).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let z = batch(8, 16, seed);
            let (_, grad) = ntxent_batch_loss_grad(&z, 0.5).unwrap();
            fd_check(z.data(), &grad, 1e-4, 1e-4, |v| {
                ntxent_batch_loss(&EmbeddingBatch::new(8, 16, v.to_vec()).unwrap(), 0.5).unwrap()
            });
        }
    }

    #[test]
    fn views_are_deterministic_and_distinct() {
        let img = GrayImage::from_fn(32, 32, |x, y| ((x * 7 + y * 3) % 17) as f64 / 8.5 - 1.0).unwrap();
        let cfg = AugmentConfig {
            output_width: 32,
            output_height: 32,
            ..AugmentConfig::default()
        };
        let (a, b) = two_views(&img, 4, &cfg).unwrap();
        assert_eq!((a.clone(), b.clone()), two_views(&img, 4, &cfg).unwrap());
        assert_ne!(a, b);
        assert_eq!(a.dims(), (32, 32));
    }
}
