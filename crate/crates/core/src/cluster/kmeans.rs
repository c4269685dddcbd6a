use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Algorithm, ClusterModel, ClusterParams};
use crate::error::{Error, Result};

const MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct SphericalKMeans {
    /// Unit-norm centroids, k×D.
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub iterations: usize,
}

fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    1.0 - a.dot(&b)
}

fn normalize_rows(x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = x.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid(format!("row {i} cannot be normalised")));
        }
        row /= norm;
    }
    Ok(out)
}

impl SphericalKMeans {
    /// Lloyd iterations under cosine distance from a k-means++ start. Stops
    /// when assignments no longer change.
    pub fn fit(x: ArrayView2<f64>, k: usize, seed: u64) -> Result<Self> {
        let n = x.nrows();
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if k > n {
            return Err(Error::invalid(format!("k = {k} exceeds the number of points {n}")));
        }
        let xs = normalize_rows(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = plus_plus_init(&xs, k, &mut rng);
        let mut labels = vec![usize::MAX; n];
        let mut iterations = 0;
        for it in 0..MAX_ITERS {
            iterations = it + 1;
            let mut changed = false;
            for i in 0..n {
                let best = nearest(&centroids, xs.row(i)).0;
                if best != labels[i] {
                    labels[i] = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = Array2::<f64>::zeros(centroids.dim());
            let mut counts = vec![0usize; k];
            for (i, &l) in labels.iter().enumerate() {
                sums.row_mut(l).scaled_add(1.0, &xs.row(i));
                counts[l] += 1;
            }
            for c in 0..k {
                let norm = sums.row(c).dot(&sums.row(c)).sqrt();
                if counts[c] == 0 || norm == 0.0 {
                    // empty cluster: re-seed at the worst-served point
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            let da = cosine_distance(centroids.row(labels[a]), xs.row(a));
                            let db = cosine_distance(centroids.row(labels[b]), xs.row(b));
                            da.total_cmp(&db).then(b.cmp(&a))
                        })
                        .expect("n > 0");
                    centroids.row_mut(c).assign(&xs.row(far));
                } else {
                    centroids.row_mut(c).assign(&(&sums.row(c) / norm));
                }
            }
        }
        Ok(Self {
            centroids,
            labels,
            iterations,
        })
    }
}

fn nearest(centroids: &Array2<f64>, row: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.axis_iter(Axis(0)).enumerate() {
        let d = cosine_distance(centroid, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(xs: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = xs.nrows();
    let mut centroids = Array2::zeros((k, xs.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&xs.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| cosine_distance(centroids.row(0), xs.row(i)).max(0.0)).collect();
    for c in 1..k {
        let total: f64 = dist.iter().map(|d| d * d).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                target -= d * d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&xs.row(pick));
        for i in 0..n {
            dist[i] = dist[i].min(cosine_distance(centroids.row(c), xs.row(i)).max(0.0));
        }
    }
    centroids
}

pub fn spherical_kmeans(x: ArrayView2<f64>, k: usize, seed: u64) -> Result<ClusterModel> {
    let fit = SphericalKMeans::fit(x, k, seed)?;
    let labels = fit.labels.iter().map(|&l| l as i32).collect();
    Ok(ClusterModel::from_labels(Algorithm::Km, labels, ClusterParams::Partition { k }, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn antipodal_bundles_split_perfectly() {
        let x = array![[1.0, 0.01], [1.0, -0.02], [0.98, 0.0], [-1.0, 0.01], [-1.0, 0.0], [-0.97, -0.01]];
        let fit = SphericalKMeans::fit(x.view(), 2, 7).unwrap();
        assert_eq!(fit.labels[0], fit.labels[1]);
        assert_eq!(fit.labels[1], fit.labels[2]);
        assert_eq!(fit.labels[3], fit.labels[4]);
        assert_eq!(fit.labels[4], fit.labels[5]);
        assert_ne!(fit.labels[0], fit.labels[3]);
    }

    #[test]
    fn single_cluster_centroid_is_normalised_mean() {
        let x = array![[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]];
        let fit = SphericalKMeans::fit(x.view(), 1, 1).unwrap();
        assert!(fit.labels.iter().all(|&l| l == 0));
        let xs = normalize_rows(x.view()).unwrap();
        let mean = xs.mean_axis(Axis(0)).unwrap();
        let expected = &mean / mean.dot(&mean).sqrt();
        for j in 0..2 {
            assert!((fit.centroids[[0, j]] - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_is_rejected() {
        let x = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(spherical_kmeans(x.view(), 1, 0).is_err());
    }
}
