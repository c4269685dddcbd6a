use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};

use super::{PcaProjection, Projection};
use crate::error::{Error, Result};

/// PCA through the eigendecomposition of the sample covariance. Components
/// are ordered by descending eigenvalue and signed so that each component's
/// largest-magnitude entry is positive.
pub fn fit_pca(x: ArrayView2<f64>, k: usize) -> Result<Projection> {
    let (n, d) = x.dim();
    if k == 0 {
        return Err(Error::invalid("PCA needs k >= 1"));
    }
    if k >= n.min(d) {
        return Err(Error::invalid(format!("PCA needs k < min(n, D) = {}", n.min(d))));
    }
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let cov = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Array2::zeros((k, d));
    let mut explained_variance = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let norm = col.norm();
        for j in 0..d {
            components[[row, j]] = sign * col[j] / norm;
        }
        // rank-deficient inputs can give tiny negative eigenvalues
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(Projection::Pca(PcaProjection {
        mean,
        components,
        explained_variance,
        explained_variance_ratio,
    }))
}

pub(super) fn project(p: &PcaProjection, x: ArrayView2<f64>) -> Array2<f64> {
    let centered = &x - &p.mean;
    centered.dot(&p.components.t())
}

impl PcaProjection {
    /// Maps reduced coordinates back into the input space.
    pub fn reconstruct(&self, y: ArrayView2<f64>) -> Array2<f64> {
        y.dot(&self.components) + &self.mean
    }
}
