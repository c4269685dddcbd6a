//! Uniform manifold approximation and projection.
//!
//! Exact k-NN graph, per-point bandwidths solved by bisection, fuzzy union
//! symmetrisation, then negative-sampling SGD on the fuzzy cross-entropy with
//! a linearly decaying learning rate.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{pca, Projection, UmapParams, UmapProjection};
use crate::error::{Error, Result};
use crate::linalg::{knn_exclusive, knn_query, sq_euclidean};

const SPREAD: f64 = 1.0;
const NEGATIVE_SAMPLE_RATE: usize = 5;
const LEARNING_RATE: f64 = 1.0;
const BANDWIDTH_ITERS: usize = 64;
const BANDWIDTH_TOL: f64 = 1e-5;
const MIN_K_DIST_SCALE: f64 = 1e-3;
const TRANSFORM_STEPS: usize = 5;
const INIT_SCALE: f64 = 10.0;

/// Least-squares fit of `1 / (1 + a d^(2b))` to the offset-exponential
/// membership curve implied by `min_dist`.
pub fn fit_ab_curve(min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * SPREAD * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / SPREAD).exp() })
        .collect();

    let residuals = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let f = 1.0 / (1.0 + a * x.powf(2.0 * b));
                (f - y) * (f - y)
            })
            .sum()
    };

    // Levenberg-Marquardt on (a, b)
    let (mut a, mut b) = (1.0, 1.0);
    let mut lambda = 1e-3;
    let mut cost = residuals(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let f = 1.0 / (1.0 + a * p);
            let r = f - y;
            let da = -p * f * f;
            let db = -a * p * 2.0 * x.ln() * f * f;
            let j = [da, db];
            for u in 0..2 {
                jtr[u] += j[u] * r;
                for v in 0..2 {
                    jtj[u][v] += j[u] * j[v];
                }
            }
        }
        let m = [
            [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
            [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
        ];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let step_a = -(m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
        let step_b = -(-m[1][0] * jtr[0] + m[0][0] * jtr[1]) / det;
        let (na, nb) = (a + step_a, b + step_b);
        let new_cost = if na > 0.0 && nb > 0.0 { residuals(na, nb) } else { f64::INFINITY };
        if new_cost < cost {
            let improvement = cost - new_cost;
            a = na;
            b = nb;
            cost = new_cost;
            lambda = (lambda * 0.3).max(1e-12);
            if improvement < 1e-14 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

/// Solves each point's bandwidth so that the memberships of its `k`
/// neighbours sum to `log2(k)`. Returns `(sigmas, rhos)`; `rho` is the
/// distance to the nearest neighbour at positive distance.
pub fn smooth_knn_distances(knn: &[Vec<(usize, f64)>], k: usize) -> (Vec<f64>, Vec<f64>) {
    let target = (k as f64).log2();
    let mean_all: f64 = {
        let total: f64 = knn.iter().flat_map(|r| r.iter().map(|e| e.1)).sum();
        let count = knn.iter().map(Vec::len).sum::<usize>().max(1);
        total / count as f64
    };
    knn.iter()
        .map(|row| {
            let (sigma, rho) = bandwidth(row.iter().map(|e| e.1), target);
            let mean_i = row.iter().map(|e| e.1).sum::<f64>() / row.len().max(1) as f64;
            let floor = if rho > 0.0 { MIN_K_DIST_SCALE * mean_i } else { MIN_K_DIST_SCALE * mean_all };
            (sigma.max(floor), rho)
        })
        .unzip()
}

fn bandwidth(dists: impl Iterator<Item = f64> + Clone, target: f64) -> (f64, f64) {
    let rho = dists.clone().find(|&d| d > 0.0).unwrap_or(0.0);
    let (mut lo, mut hi, mut mid) = (0.0_f64, f64::INFINITY, 1.0_f64);
    for _ in 0..BANDWIDTH_ITERS {
        let psum: f64 = dists.clone().map(|d| (-((d - rho).max(0.0)) / mid).exp()).sum();
        if (psum - target).abs() < BANDWIDTH_TOL {
            break;
        }
        if psum > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
        }
    }
    (mid, rho)
}

fn membership(d: f64, rho: f64, sigma: f64) -> f64 {
    (-((d - rho).max(0.0)) / sigma).exp()
}

/// Fuzzy union of the directed k-NN memberships, as a symmetric edge list
/// carrying both directions of every pair.
fn fuzzy_graph(knn: &[Vec<(usize, f64)>], sigmas: &[f64], rhos: &[f64]) -> Vec<(usize, usize, f64)> {
    let mut pairs: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for (i, row) in knn.iter().enumerate() {
        for &(j, d) in row {
            let w = membership(d, rhos[i], sigmas[i]);
            let key = (i.min(j), i.max(j));
            let slot = pairs.entry(key).or_insert((0.0, 0.0));
            if i < j {
                slot.0 = w;
            } else {
                slot.1 = w;
            }
        }
    }
    let mut edges = Vec::with_capacity(pairs.len() * 2);
    for ((i, j), (wij, wji)) in pairs {
        let w = wij + wji - wij * wji;
        if w > 0.0 {
            edges.push((i, j, w));
            edges.push((j, i, w));
        }
    }
    edges
}

fn initial_layout(x: ArrayView2<f64>, out_dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut y = match pca::fit_pca(x, out_dim) {
        Ok(Projection::Pca(p)) => pca::project(&p, x),
        _ => Array2::from_shape_fn((n, out_dim), |_| rng.random_range(-1.0..1.0)),
    };
    let max_abs = y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        y *= INIT_SCALE / max_abs;
    }
    let jitter = Normal::new(0.0, 1e-4).expect("valid sd");
    y.mapv_inplace(|v| v + jitter.sample(rng));
    y
}

#[inline]
fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

fn row_sq_dist(y: &Array2<f64>, i: usize, j: usize) -> f64 {
    sq_euclidean(y.row(i), y.row(j))
}

pub fn fit_umap(x: ArrayView2<f64>, params: &UmapParams) -> Result<Projection> {
    params.validate()?;
    let (n, d) = x.dim();
    if n <= params.n_neighbors {
        return Err(Error::invalid(format!(
            "UMAP needs more points ({n}) than n_neighbors ({})",
            params.n_neighbors
        )));
    }
    if params.out_dim >= d {
        return Err(Error::invalid(format!("out_dim {} must be below input dim {d}", params.out_dim)));
    }
    let k = params.n_neighbors;
    let (a, b) = fit_ab_curve(params.min_dist);
    let knn = knn_exclusive(x, k);
    let (sigmas, rhos) = smooth_knn_distances(&knn, k);
    let mut edges = fuzzy_graph(&knn, &sigmas, &rhos);

    let n_epochs = params.n_epochs.max(1);
    let max_w = edges.iter().map(|e| e.2).fold(0.0_f64, f64::max);
    edges.retain(|e| e.2 >= max_w / n_epochs as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut y = initial_layout(x, params.out_dim, &mut rng);
    optimize_layout(&mut y, &edges, a, b, n_epochs, &mut rng);

    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("UMAP layout diverged".into()));
    }
    Ok(Projection::Umap(UmapProjection {
        params: *params,
        a,
        b,
        reference: x.to_owned(),
        embedding: y,
    }))
}

fn optimize_layout(y: &mut Array2<f64>, edges: &[(usize, usize, f64)], a: f64, b: f64, n_epochs: usize, rng: &mut ChaCha8Rng) {
    let n = y.nrows();
    let dim = y.ncols();
    let max_w = edges.iter().map(|e| e.2).fold(0.0_f64, f64::max);
    let eps: Vec<f64> = edges.iter().map(|e| max_w / e.2).collect();
    let eps_neg: Vec<f64> = eps.iter().map(|e| e / NEGATIVE_SAMPLE_RATE as f64).collect();
    let mut next_sample = eps.clone();
    let mut next_neg = eps_neg.clone();
    let mut grad = vec![0.0; dim];

    for epoch in 0..n_epochs {
        let alpha = LEARNING_RATE * (1.0 - epoch as f64 / n_epochs as f64);
        let now = epoch as f64;
        for (e, &(head, tail, _)) in edges.iter().enumerate() {
            if next_sample[e] > now {
                continue;
            }
            let dist_sq = row_sq_dist(y, head, tail);
            let coeff = if dist_sq > 0.0 {
                -2.0 * a * b * dist_sq.powf(b - 1.0) / (a * dist_sq.powf(b) + 1.0)
            } else {
                0.0
            };
            for (dd, g) in grad.iter_mut().enumerate() {
                *g = clip(coeff * (y[[head, dd]] - y[[tail, dd]]));
            }
            for (dd, g) in grad.iter().enumerate() {
                y[[head, dd]] += g * alpha;
                y[[tail, dd]] -= g * alpha;
            }
            next_sample[e] += eps[e];

            let n_neg = ((now - next_neg[e]) / eps_neg[e]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let other = rng.random_range(0..n);
                if other == head {
                    continue;
                }
                let dist_sq = row_sq_dist(y, head, other);
                let coeff = if dist_sq > 0.0 {
                    2.0 * b / ((0.001 + dist_sq) * (a * dist_sq.powf(b) + 1.0))
                } else {
                    0.0
                };
                for dd in 0..dim {
                    let g = if coeff > 0.0 { clip(coeff * (y[[head, dd]] - y[[other, dd]])) } else { 4.0 };
                    y[[head, dd]] += g * alpha;
                }
            }
            next_neg[e] += n_neg as f64 * eps_neg[e];
        }
    }
}

/// Places each new point at the membership-weighted mean of its reference
/// neighbours, then refines it with a few SGD steps against the fixed
/// reference layout.
pub(super) fn transform(u: &UmapProjection, x: ArrayView2<f64>) -> Array2<f64> {
    let k = u.params.n_neighbors.min(u.reference.nrows());
    let knn = knn_query(u.reference.view(), x, k);
    let target = (k as f64).log2();
    let (a, b) = (u.a, u.b);
    let dim = u.embedding.ncols();
    let n_ref = u.embedding.nrows();

    let rows: Vec<Vec<f64>> = knn
        .par_iter()
        .enumerate()
        .map(|(q, row)| {
            let (sigma, rho) = bandwidth(row.iter().map(|e| e.1), target);
            let mean_d = row.iter().map(|e| e.1).sum::<f64>() / row.len() as f64;
            let sigma = sigma.max(MIN_K_DIST_SCALE * mean_d.max(f64::MIN_POSITIVE));
            let weights: Vec<f64> = row.iter().map(|&(_, d)| membership(d, rho, sigma)).collect();
            let total: f64 = weights.iter().sum();
            let mut point = vec![0.0; dim];
            for (&(j, _), w) in row.iter().zip(&weights) {
                for (dd, p) in point.iter_mut().enumerate() {
                    *p += w / total * u.embedding[[j, dd]];
                }
            }

            let mut rng = ChaCha8Rng::seed_from_u64(u.params.seed ^ (q as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let max_w = weights.iter().copied().fold(0.0_f64, f64::max);
            for step in 0..TRANSFORM_STEPS {
                let alpha = 0.25 * LEARNING_RATE * (1.0 - step as f64 / TRANSFORM_STEPS as f64);
                for (&(j, _), &w) in row.iter().zip(&weights) {
                    let other = u.embedding.row(j);
                    let dist_sq: f64 = point.iter().zip(other.iter()).map(|(p, o)| (p - o) * (p - o)).sum();
                    if dist_sq > 0.0 {
                        let coeff = -2.0 * a * b * dist_sq.powf(b - 1.0) / (a * dist_sq.powf(b) + 1.0);
                        for (dd, p) in point.iter_mut().enumerate() {
                            *p += w / max_w * clip(coeff * (*p - other[dd])) * alpha;
                        }
                    }
                    for _ in 0..NEGATIVE_SAMPLE_RATE {
                        let r = u.embedding.row(rng.random_range(0..n_ref));
                        let dist_sq: f64 = point.iter().zip(r.iter()).map(|(p, o)| (p - o) * (p - o)).sum();
                        if dist_sq > 0.0 {
                            let coeff = 2.0 * b / ((0.001 + dist_sq) * (a * dist_sq.powf(b) + 1.0));
                            for (dd, p) in point.iter_mut().enumerate() {
                                *p += clip(coeff * (*p - r[dd])) * alpha;
                            }
                        }
                    }
                }
            }
            point
        })
        .collect();

    let mut out = Array2::zeros((x.nrows(), dim));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&ndarray::Array1::from(src));
    }
    out
}
