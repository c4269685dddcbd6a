//! Exact Gaussian-process regression with an RBF kernel.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NOISE_FLOOR: f64 = 1e-8;
const JITTER_START: f64 = 1e-6;
const JITTER_MAX: f64 = 1e-2;
/// Log-hyperparameters are confined to this box during the search.
const LOG_BOUND: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub signal_var: f64,
    pub lengthscale: f64,
    pub noise_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpParams {
    pub restarts: usize,
    pub max_iters: u64,
}

impl Default for GpParams {
    fn default() -> Self {
        Self {
            restarts: 16,
            max_iters: 200,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rbf_d2(d2: f64, hyper: &GpHyper) -> f64 {
    hyper.signal_var * (-d2 / (2.0 * hyper.lengthscale * hyper.lengthscale)).exp()
}

pub fn rbf(a: &[f64], b: &[f64], hyper: &GpHyper) -> f64 {
    rbf_d2(sq_dist(a, b), hyper)
}

fn sq_dist_matrix(x: &[Vec<f64>]) -> DMatrix<f64> {
    let n = x.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = sq_dist(&x[i], &x[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

fn kernel_matrix(d2: &DMatrix<f64>, hyper: &GpHyper) -> DMatrix<f64> {
    d2.map(|v| rbf_d2(v, hyper))
}

/// Factor, weights and log marginal likelihood of `y` under `hyper`.
fn condition(d2: &DMatrix<f64>, y: &[f64], hyper: &GpHyper) -> Result<(Cholesky<f64, Dyn>, f64, DVector<f64>, f64)> {
    let k = kernel_matrix(d2, hyper);
    let (chol, jitter) = factor(&k, hyper.noise_var)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let n = y.len() as f64;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    let log_marginal = -0.5 * yv.dot(&alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Ok((chol, jitter, alpha, log_marginal))
}

/// Cholesky of `K + noise I`, adding jitter from 1e-6 upward (×10) when
/// the plain factorisation fails.
fn factor(k: &DMatrix<f64>, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let with = |extra: f64| {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += noise + extra;
        }
        Cholesky::new(m)
    };
    if let Some(c) = with(0.0) {
        return Ok((c, 0.0));
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        if let Some(c) = with(jitter) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "kernel matrix is not positive definite with jitter up to {JITTER_MAX:e}"
    )))
}

/// In-place lower Cholesky of a row-major `n × n` matrix; only the lower
/// triangle is read and written. Row-oriented so the inner products run
/// over contiguous memory.
fn cholesky_rows(a: &mut [f64], n: usize) -> bool {
    for i in 0..n {
        let (done, rest) = a.split_at_mut(i * n);
        let row_i = &mut rest[..n];
        for j in 0..=i {
            let row_j = if j == i { &row_i[..j] } else { &done[j * n..j * n + j] };
            let dot: f64 = row_i[..j].iter().zip(row_j).map(|(p, q)| p * q).sum();
            let v = row_i[j] - dot;
            if j == i {
                if !(v > 0.0) || !v.is_finite() {
                    return false;
                }
                row_i[i] = v.sqrt();
            } else {
                row_i[j] = v / done[j * n + j];
            }
        }
    }
    true
}

/// Log marginal likelihood from a row-major squared-distance matrix, with
/// the same jitter escalation as [`factor`].
fn log_marginal(d2: &[f64], y: &[f64], hyper: &GpHyper) -> Option<f64> {
    let n = y.len();
    let mut l = vec![0.0; n * n];
    let mut extra = 0.0;
    loop {
        for i in 0..n {
            for j in 0..=i {
                l[i * n + j] = rbf_d2(d2[i * n + j], hyper);
            }
            l[i * n + i] += hyper.noise_var + extra;
        }
        if cholesky_rows(&mut l, n) {
            break;
        }
        extra = if extra == 0.0 { JITTER_START } else { extra * 10.0 };
        if extra > JITTER_MAX * (1.0 + 1e-9) {
            return None;
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let dot: f64 = l[i * n..i * n + i].iter().zip(&z[..i]).map(|(p, q)| p * q).sum();
        z[i] = (y[i] - dot) / l[i * n + i];
    }
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let log_det: f64 = (0..n).map(|i| l[i * n + i].ln()).sum();
    Some(-0.5 * quad - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: GpHyper,
    pub jitter: f64,
    pub log_marginal: f64,
    x: Vec<Vec<f64>>,
    alpha: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

fn validate(x: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::dim(x.len(), y.len()));
    }
    let dim = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("GP inputs have ragged rows"));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("GP inputs contain non-finite values".into()));
    }
    Ok(())
}

impl GpModel {
    /// Conditions the GP on `(x, y)` with fixed hyperparameters. The prior
    /// mean is zero; centre `y` beforehand if needed.
    pub fn fit_fixed(x: &[Vec<f64>], y: &[f64], hyper: GpHyper) -> Result<Self> {
        validate(x, y)?;
        if x.is_empty() {
            return Err(Error::invalid("GP needs training points"));
        }
        if !(hyper.signal_var > 0.0 && hyper.lengthscale > 0.0 && hyper.noise_var >= 0.0) {
            return Err(Error::invalid(format!("invalid GP hyperparameters {hyper:?}")));
        }
        let (chol, jitter, alpha, log_marginal) = condition(&sq_dist_matrix(x), y, &hyper)?;
        Ok(Self {
            hyper,
            jitter,
            log_marginal,
            x: x.to_vec(),
            alpha,
            chol,
        })
    }

    /// Maximises the log marginal likelihood over (signal variance,
    /// lengthscale, noise variance) with Nelder-Mead: a short run from each
    /// point of a log-uniform grid, then a full run from the best of them.
    pub fn fit(x: &[Vec<f64>], y: &[f64], params: &GpParams) -> Result<Self> {
        validate(x, y)?;
        if x.len() < 10 {
            return Err(Error::invalid(format!("GP needs at least 10 training rows, have {}", x.len())));
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        let starts = start_grid(params.restarts, sd);
        let d2 = sq_dist_matrix(x).transpose();
        let problem = Marginal { d2: d2.as_slice(), y };
        let screen = (params.max_iters / 4).max(1);
        let best = starts
            .par_iter()
            .enumerate()
            .filter_map(|(i, start)| nelder_mead(&problem, start, screen).map(|(c, t)| (i, c, t)))
            .collect::<Vec<_>>()
            .into_iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .ok_or_else(|| Error::Numerical("GP hyperparameter search found no feasible point".into()))?;
        let theta = match nelder_mead(&problem, &best.2, params.max_iters) {
            Some((cost, theta)) if cost <= best.1 => theta,
            _ => best.2,
        };
        Self::fit_fixed(x, y, hyper_from(&theta))
    }

    /// Latent predictive mean and variance at each query point.
    pub fn predict(&self, queries: &[Vec<f64>]) -> Vec<(f64, f64)> {
        queries
            .iter()
            .map(|q| {
                let ks = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| rbf(xi, q, &self.hyper)));
                let mean = ks.dot(&self.alpha);
                let v = self.chol.l_dirty().solve_lower_triangular(&ks).expect("non-singular factor");
                let var = (self.hyper.signal_var - v.dot(&v)).max(0.0);
                (mean, var)
            })
            .collect()
    }

    /// Draws from the predictive normal of a noisy observation.
    pub fn draws(&self, mean: f64, var: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let sd = (var + self.hyper.noise_var).sqrt();
        match Normal::new(mean, sd) {
            Ok(dist) if sd > 0.0 => (0..n).map(|_| dist.sample(rng)).collect(),
            _ => vec![mean; n],
        }
    }
}

/// Nelder-Mead from `start` with an initial simplex of +0.5 steps.
fn nelder_mead(problem: &Marginal, start: &[f64], iters: u64) -> Option<(f64, Vec<f64>)> {
    let simplex = (0..=start.len())
        .map(|j| {
            let mut v = start.to_vec();
            if j > 0 {
                v[j - 1] += 0.5;
            }
            v
        })
        .collect();
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-8).ok()?;
    let res = Executor::new(problem.clone(), solver)
        .configure(|s| s.max_iters(iters))
        .run()
        .ok()?;
    let theta = res.state.best_param?;
    let cost = res.state.best_cost;
    cost.is_finite().then_some((cost, theta))
}

fn hyper_from(theta: &[f64]) -> GpHyper {
    GpHyper {
        signal_var: (2.0 * theta[0]).exp(),
        lengthscale: theta[1].exp(),
        noise_var: (2.0 * theta[2]).exp().max(NOISE_FLOOR),
    }
}

/// Starting points `(log sd_f, log l, log sd_n)`: signal at the data scale,
/// lengthscale and noise on log-uniform grids.
fn start_grid(restarts: usize, sd: f64) -> Vec<Vec<f64>> {
    let side = (restarts as f64).sqrt().ceil().max(1.0) as usize;
    let logspace = |lo: f64, hi: f64, i: usize| {
        if side == 1 {
            (lo + hi) / 2.0
        } else {
            lo + (hi - lo) * i as f64 / (side - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(restarts);
    'grid: for a in 0..side {
        for b in 0..side {
            if out.len() == restarts {
                break 'grid;
            }
            let l = logspace((0.02f64).ln(), (2.0f64).ln(), a);
            let noise = logspace((1e-3 * sd).ln(), (0.5 * sd).ln(), b);
            out.push(vec![sd.ln(), l, noise]);
        }
    }
    out
}

#[derive(Clone)]
struct Marginal<'a> {
    d2: &'a [f64],
    y: &'a [f64],
}

impl CostFunction for Marginal<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        if theta.iter().any(|t| !t.is_finite() || t.abs() > LOG_BOUND) {
            return Ok(f64::INFINITY);
        }
        Ok(log_marginal(self.d2, self.y, &hyper_from(theta)).map_or(f64::INFINITY, |lm| -lm))
    }
}
