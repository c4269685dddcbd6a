//! Dense distance helpers shared by the reduction and clustering code.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

#[inline]
pub fn sq_euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    sq_euclidean(a, b).sqrt()
}

/// Full n×n Euclidean distance matrix, rows computed in parallel.
pub fn pairwise_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| euclidean(x.row(i), x.row(j))).collect())
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, n), flat).expect("square")
}

/// Exact k nearest neighbours of every row, excluding the row itself.
/// Ties are broken by index so the result is deterministic.
pub fn knn_exclusive(x: ArrayView2<f64>, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = x.nrows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, euclidean(x.row(i), x.row(j))))
                .collect();
            partial_sort(&mut d, k);
            d.truncate(k);
            d
        })
        .collect()
}

/// k nearest reference rows for each query row (no self-exclusion).
pub fn knn_query(reference: ArrayView2<f64>, queries: ArrayView2<f64>, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = reference.nrows();
    (0..queries.nrows())
        .into_par_iter()
        .map(|q| {
            let mut d: Vec<(usize, f64)> =
                (0..n).map(|j| (j, euclidean(queries.row(q), reference.row(j)))).collect();
            partial_sort(&mut d, k);
            d.truncate(k);
            d
        })
        .collect()
}

fn cmp_dist(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

fn partial_sort(d: &mut [(usize, f64)], k: usize) {
    if k < d.len() && k > 0 {
        d.select_nth_unstable_by(k - 1, cmp_dist);
        d[..k].sort_by(cmp_dist);
    } else {
        d.sort_by(cmp_dist);
    }
}
