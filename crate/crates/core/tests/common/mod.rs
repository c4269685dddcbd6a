//! Fixtures and reference implementations shared by the integration tests.
#![allow(dead_code)]

use chrono::NaiveDate;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use redcast::cluster::CondensedTree;
use redcast::forecast::GpHyper;

pub fn day(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

pub fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((n, d), |_| nd.sample(&mut rng))
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Kruskal over the complete mutual-reachability graph with a plain
/// union-find.
pub fn kruskal_weight(x: &Array2<f64>, core: &[f64]) -> f64 {
    let n = x.nrows();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(x.row(i).as_slice().unwrap(), x.row(j).as_slice().unwrap());
            edges.push((d.max(core[i]).max(core[j]), i, j));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut comp: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for (w, i, j) in edges {
        let (ci, cj) = (comp[i], comp[j]);
        if ci != cj {
            total += w;
            for c in comp.iter_mut() {
                if *c == cj {
                    *c = ci;
                }
            }
        }
    }
    total
}

pub fn silhouette_oracle(x: &Array2<f64>, labels: &[i32]) -> f64 {
    let n = x.nrows();
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..n {
        if labels[i] < 0 {
            continue;
        }
        count += 1;
        let own = labels.iter().filter(|&&l| l == labels[i]).count();
        if own == 1 {
            continue;
        }
        let mut a = 0.0;
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                a += dist(x.row(i).as_slice().unwrap(), x.row(j).as_slice().unwrap());
            }
        }
        a /= (own - 1) as f64;
        let mut b = f64::INFINITY;
        let mut others: Vec<i32> = labels.iter().copied().filter(|&l| l >= 0 && l != labels[i]).collect();
        others.sort_unstable();
        others.dedup();
        for l in others {
            let (mut s, mut m) = (0.0, 0);
            for j in 0..n {
                if labels[j] == l {
                    s += dist(x.row(i).as_slice().unwrap(), x.row(j).as_slice().unwrap());
                    m += 1;
                }
            }
            b = b.min(s / m as f64);
        }
        total += (b - a) / a.max(b);
    }
    total / count as f64
}

/// Student-t density, the square root of an F(1, nu) variate.
pub fn t_pdf(t: f64, nu: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let c = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
    (c - (nu + 1.0) / 2.0 * (1.0 + t * t / nu).ln()).exp()
}

/// P(F(1, nu) > f) = 1 - 2 * integral of the t density over [0, sqrt f],
/// by composite Simpson.
pub fn f_tail_quadrature(f: f64, nu: f64) -> f64 {
    let upper = f.sqrt();
    let m = 20_000;
    let h = upper / m as f64;
    let mut s = t_pdf(0.0, nu) + t_pdf(upper, nu);
    for i in 1..m {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * t_pdf(i as f64 * h, nu);
    }
    1.0 - 2.0 * s * h / 3.0
}

/// Trustworthiness by its definition, with full rank tables.
pub fn trust_oracle(x: &Array2<f64>, y: &Array2<f64>, k: usize) -> f64 {
    let n = x.nrows();
    let ranks = |m: &Array2<f64>, i: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        idx.sort_by(|&a, &b| {
            let da = dist(m.row(i).as_slice().unwrap(), m.row(a).as_slice().unwrap());
            let db = dist(m.row(i).as_slice().unwrap(), m.row(b).as_slice().unwrap());
            da.total_cmp(&db).then(a.cmp(&b))
        });
        idx
    };
    let mut penalty = 0.0;
    for i in 0..n {
        let high = ranks(x, i);
        for &j in ranks(y, i).iter().take(k) {
            let r = high.iter().position(|&h| h == j).unwrap() + 1;
            if r > k {
                penalty += (r - k) as f64;
            }
        }
    }
    let (n, k) = (n as f64, k as f64);
    1.0 - 2.0 / (n * k * (2.0 * n - 3.0 * k - 1.0)) * penalty
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn invert(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        inv.swap(c, p);
        let d = a[c][c];
        for j in 0..n {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                for j in 0..n {
                    a[r][j] -= f * a[c][j];
                    inv[r][j] -= f * inv[c][j];
                }
            }
        }
    }
    inv
}

pub fn rbf_oracle(a: &[f64], b: &[f64], h: &GpHyper) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    h.signal_var * (-d2 / (2.0 * h.lengthscale * h.lengthscale)).exp()
}

/// Standard normal CDF from the Maclaurin series of erf.
pub fn phi_series(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    let (mut term, mut sum) = (x, x);
    for n in 1..80 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    0.5 * (1.0 + 2.0 / std::f64::consts::PI.sqrt() * sum)
}

/// Blobs of varying size and spread plus uniform background points.
pub fn blob_fixture(seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_blobs = rng.random_range(2..5);
    let mut rows = Vec::new();
    for _ in 0..n_blobs {
        let centre: Vec<f64> = (0..3).map(|_| rng.random_range(-20.0..20.0)).collect();
        let spread = Normal::new(0.0, rng.random_range(0.5..2.0)).unwrap();
        for _ in 0..rng.random_range(20..60) {
            rows.push(centre.iter().map(|c| c + spread.sample(&mut rng)).collect::<Vec<f64>>());
        }
    }
    for _ in 0..rng.random_range(0..15) {
        rows.push((0..3).map(|_| rng.random_range(-30.0..30.0)).collect());
    }
    Array2::from_shape_fn((rows.len(), 3), |(i, j)| rows[i][j])
}

/// Points in the subtree of `node`, with the density at which each one
/// finally leaves the hierarchy.
pub fn subtree_points(tree: &CondensedTree, node: usize) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![node];
    while let Some(id) = stack.pop() {
        out.extend(tree.nodes[id].points.iter().copied());
        stack.extend(tree.nodes[id].children.iter().copied());
    }
    out
}

/// S(C) = sum over x in C of (lambda_max(x, C) - lambda_min(C)), where a
/// point's membership in C ends when it falls out or when C splits.
pub fn stability_ledger(tree: &CondensedTree, node: usize) -> f64 {
    let c = &tree.nodes[node];
    subtree_points(tree, node)
        .into_iter()
        .map(|(_, lam)| lam.min(c.lambda_death) - c.lambda_birth)
        .sum()
}

pub fn two_blobs(seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let mut rows: Vec<[f64; 2]> = Vec::new();
    for centre in [[0.0, 0.0], [12.0, 0.0]] {
        for _ in 0..30 {
            rows.push([centre[0] + nd.sample(&mut rng), centre[1] + nd.sample(&mut rng)]);
        }
    }
    // far outliers, one per corner of a wide box plus one above
    for corner in [[-60.0, -60.0], [-60.0, 60.0], [70.0, -60.0], [70.0, 60.0], [6.0, 90.0]] {
        rows.push([corner[0] + rng.random_range(-5.0..5.0), corner[1] + rng.random_range(-5.0..5.0)]);
    }
    Array2::from_shape_fn((65, 2), |(i, j)| rows[i][j])
}
