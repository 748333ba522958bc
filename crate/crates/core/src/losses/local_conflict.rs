//! Local conflict loss: fraction of 4-neighbour pixel orderings that the
//! enhancement flips, plus a logistic relaxation that can be trained.

use crate::error::{ensure, Error, Result};
use crate::image::ImageBatch;

fn check_shapes(y: &ImageBatch, x: &ImageBatch) -> Result<()> {
    if !y.same_shape(x) {
        return Err(Error::Dimension(
            "enhanced and original batches differ in shape".into(),
        ));
    }
    Ok(())
}

/// Visits every unordered in-bounds neighbour pair `(i, j)` of a plane once.
#[inline]
fn for_each_pair(w: usize, h: usize, mut f: impl FnMut(usize, usize)) {
    for row in 0..h {
        let base = row * w;
        for col in 0..w {
            let i = base + col;
            if col + 1 < w {
                f(i, i + 1);
            }
            if row + 1 < h {
                f(i, i + w);
            }
        }
    }
}

/// Counts directed neighbour pairs whose strict ordering differs between
/// `y` and `x`, normalized by `4 B C W H`. Equal pixels never conflict.
pub fn local_conflict_loss_exact(y: &ImageBatch, x: &ImageBatch) -> Result<f64> {
    check_shapes(y, x)?;
    let (w, h) = (x.width(), x.height());
    let mut conflicts = 0u64;
    for (yp, xp) in y.planes().zip(x.planes()) {
        for_each_pair(w, h, |i, j| {
            conflicts += u64::from((yp[i] > yp[j]) ^ (xp[i] > xp[j]));
            conflicts += u64::from((yp[j] > yp[i]) ^ (xp[j] > xp[i]));
        });
    }
    Ok(conflicts as f64 / (4 * x.data().len()) as f64)
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smooth surrogate: each indicator `a > b` becomes `logistic((a - b) / t)`
/// and `p XOR q` becomes `p + q - 2pq`. Returns the value and `dL/dY`.
pub fn local_conflict_loss_smooth_grad(
    y: &ImageBatch,
    x: &ImageBatch,
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(y, x)?;
    ensure!(
        temperature > 0.0 && temperature.is_finite(),
        Parameter,
        "temperature must be positive, got {temperature}"
    );
    let (w, h) = (x.width(), x.height());
    let plane = w * h;
    let norm = (4 * x.data().len()) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; y.data().len()];
    for (b, (yp, xp)) in y.planes().zip(x.planes()).enumerate() {
        let g = &mut grad[b * plane..(b + 1) * plane];
        for_each_pair(w, h, |i, j| {
            let p = logistic((yp[i] - yp[j]) / temperature);
            let q = logistic((xp[i] - xp[j]) / temperature);
            // both directions of the pair contribute p + q - 2pq
            total += 2.0 * (p + q - 2.0 * p * q);
            let d = 2.0 * (1.0 - 2.0 * q) * p * (1.0 - p) / temperature / norm;
            g[i] += d;
            g[j] -= d;
        });
    }
    Ok((total / norm, grad))
}

pub fn local_conflict_loss_smooth(y: &ImageBatch, x: &ImageBatch, temperature: f64) -> Result<f64> {
    local_conflict_loss_smooth_grad(y, x, temperature).map(|(v, _)| v)
}
