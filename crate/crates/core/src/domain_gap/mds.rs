use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{ensure, Result};

/// Torgerson scaling: double-centre `-D^2 / 2`, keep the top `dim`
/// eigenpairs, scale eigenvectors by the square root of the clamped
/// eigenvalues. Each axis is sign-fixed so its largest-magnitude entry is
/// positive.
pub fn classical_mds(d: &[Vec<f64>], dim: usize) -> Result<Vec<Vec<f64>>> {
    let n = d.len();
    ensure!(dim >= 1, Parameter, "MDS dimension must be positive");
    ensure!(n > dim, Parameter, "MDS into {dim} dimensions needs at least {} points", dim + 1);
    ensure!(d.iter().all(|r| r.len() == n), Dimension, "distance matrix must be square");
    let scale = d.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        ensure!(d[i][i].abs() <= 1e-12 * scale.max(1.0), Parameter, "distance matrix diagonal must be zero");
        for j in 0..n {
            ensure!(d[i][j].is_finite() && d[i][j] >= 0.0, Parameter, "distances must be finite and non-negative");
            ensure!(
                (d[i][j] - d[j][i]).abs() <= 1e-12 * scale.max(1.0),
                Parameter,
                "distance matrix is not symmetric at ({i}, {j})"
            );
        }
    }
    let sq = DMatrix::from_fn(n, n, |i, j| {
        let v = 0.5 * (d[i][j] + d[j][i]);
        v * v
    });
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&c)));
    let mut coords = vec![vec![0.0; dim]; n];
    for (axis, &k) in order.iter().take(dim).enumerate() {
        let lambda = eig.eigenvalues[k].max(0.0);
        let col = eig.eigenvectors.column(k);
        let pivot = (0..n).fold(0, |best, i| if col[i].abs() > col[best].abs() + 1e-12 { i } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][axis] = sign * col[i] * lambda.sqrt();
        }
    }
    Ok(coords)
}
