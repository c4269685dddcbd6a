use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::euclidean;

/// Trustworthiness of a low-dimensional embedding: 1 minus a normalised
/// penalty on low-dimensional neighbours that rank beyond `k` in the input
/// space. Neighbour ranks break distance ties by index.
pub fn trustworthiness(x: ArrayView2<f64>, y: ArrayView2<f64>, k: usize) -> Result<f64> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::dim(n, y.nrows()));
    }
    if k == 0 || 2 * k >= n {
        return Err(Error::invalid(format!("trustworthiness needs 0 < k < n/2 (k={k}, n={n})")));
    }

    let order = |m: ArrayView2<f64>, i: usize| -> Vec<usize> {
        let mut idx: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, euclidean(m.row(i), m.row(j)))).collect();
        idx.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        idx.into_iter().map(|e| e.0).collect()
    };

    let penalty: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let high = order(x, i);
            let mut rank = vec![0usize; n];
            for (r, &j) in high.iter().enumerate() {
                rank[j] = r + 1;
            }
            order(y, i)
                .into_iter()
                .take(k)
                .map(|j| rank[j].saturating_sub(k) as f64)
                .sum::<f64>()
        })
        .sum();

    let (nf, kf) = (n as f64, k as f64);
    Ok(1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty)
}
