use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Algorithm, ClusterModel, ClusterParams};
use crate::error::{Error, Result};
use crate::linalg::sq_euclidean;

const MAX_ITERS: usize = 200;
const TOL: f64 = 1e-6;
const VAR_FLOOR: f64 = 1e-6;
/// A component whose total responsibility drops below this has collapsed.
const COLLAPSE_MASS: f64 = 1e-3;

/// Diagonal-covariance Gaussian mixture fitted by EM.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
    pub labels: Vec<usize>,
    /// Total log-likelihood after each E-step.
    pub log_likelihood: Vec<f64>,
}

fn log_density(x: ndarray::ArrayView1<f64>, mean: ndarray::ArrayView1<f64>, var: ndarray::ArrayView1<f64>) -> f64 {
    let mut s = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mean.iter()).zip(var.iter()) {
        s += -0.5 * ((2.0 * PI * vi).ln() + (xi - mi) * (xi - mi) / vi);
    }
    s
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Euclidean k-means (k-means++ start, Lloyd) used to seed EM.
fn kmeans_init(x: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    centers.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_euclidean(x.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let mut pick = rng.random_range(0..n);
        if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            for (i, d) in d2.iter().enumerate() {
                t -= d;
                if t <= 0.0 {
                    pick = i;
                    break;
                }
            }
        }
        centers.row_mut(c).assign(&x.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_euclidean(x.row(i), centers.row(c)));
        }
    }
    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let best = (0..k)
                .min_by(|&a, &b| sq_euclidean(x.row(i), centers.row(a)).total_cmp(&sq_euclidean(x.row(i), centers.row(b))))
                .expect("k > 0");
            if best != labels[i] {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &x.row(i));
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

impl GaussianMixture {
    pub fn fit(x: ArrayView2<f64>, k: usize, seed: u64) -> Result<Self> {
        let (n, d) = x.dim();
        if k == 0 || n <= k {
            return Err(Error::invalid(format!("GMM needs 1 <= k < n (k={k}, n={n})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = kmeans_init(x, k, &mut rng);
        let mut resp = Array2::<f64>::zeros((n, k));
        for (i, &l) in init.iter().enumerate() {
            resp[[i, l]] = 1.0;
        }
        let global_var: Array1<f64> = x.var_axis(Axis(0), 0.0).mapv(|v| v.max(VAR_FLOOR));

        let mut gm = GaussianMixture {
            weights: vec![1.0 / k as f64; k],
            means: Array2::zeros((k, d)),
            variances: Array2::ones((k, d)),
            labels: Vec::new(),
            log_likelihood: Vec::new(),
        };
        let mut reseeded = false;
        let mut prev = f64::NEG_INFINITY;
        let mut log_rows = vec![0.0_f64; n];
        for _ in 0..MAX_ITERS {
            // M step
            let mass = resp.sum_axis(Axis(0));
            if let Some(c) = (0..k).find(|&c| mass[c] < COLLAPSE_MASS) {
                if reseeded {
                    return Err(Error::Numerical(format!("GMM component {c} collapsed twice")));
                }
                reseeded = true;
                let far = (0..n)
                    .min_by(|&a, &b| log_rows[a].total_cmp(&log_rows[b]).then(a.cmp(&b)))
                    .expect("n > 0");
                log::warn!("GMM component {c} collapsed; re-seeding at point {far}");
                gm.means.row_mut(c).assign(&x.row(far));
                gm.variances.row_mut(c).assign(&global_var);
                gm.weights[c] = 1.0 / k as f64;
                let total: f64 = gm.weights.iter().sum();
                gm.weights.iter_mut().for_each(|w| *w /= total);
                prev = f64::NEG_INFINITY;
            } else {
                for c in 0..k {
                    gm.weights[c] = mass[c] / n as f64;
                    let r = resp.column(c);
                    let mean = x.t().dot(&r) / mass[c];
                    let mut var = Array1::<f64>::zeros(d);
                    for i in 0..n {
                        let diff = &x.row(i) - &mean;
                        var.scaled_add(r[i], &(&diff * &diff));
                    }
                    var /= mass[c];
                    gm.means.row_mut(c).assign(&mean);
                    gm.variances.row_mut(c).assign(&var.mapv(|v| v.max(VAR_FLOOR)));
                }
            }

            // E step
            let mut ll = 0.0;
            let mut lp = vec![0.0; k];
            for i in 0..n {
                for c in 0..k {
                    lp[c] = gm.weights[c].ln() + log_density(x.row(i), gm.means.row(c), gm.variances.row(c));
                }
                let norm = log_sum_exp(&lp);
                log_rows[i] = norm;
                ll += norm;
                for c in 0..k {
                    resp[[i, c]] = (lp[c] - norm).exp();
                }
            }
            if !ll.is_finite() {
                return Err(Error::Numerical("GMM log-likelihood is not finite".into()));
            }
            gm.log_likelihood.push(ll);
            if (ll - prev).abs() < TOL {
                break;
            }
            prev = ll;
        }
        gm.labels = resp
            .axis_iter(Axis(0))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect();
        Ok(gm)
    }
}

pub fn gmm_fit(x: ArrayView2<f64>, k: usize, seed: u64) -> Result<ClusterModel> {
    let gm = GaussianMixture::fit(x, k, seed)?;
    let labels = gm.labels.iter().map(|&l| l as i32).collect();
    Ok(ClusterModel::from_labels(Algorithm::Gmm, labels, ClusterParams::Partition { k }, k))
}
