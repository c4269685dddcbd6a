//! Forecast error metrics and the Z-test used to mark significant
//! improvements from adding covariates.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLES: usize = 10_000;

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::dim(actual.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::invalid("rmse of an empty series"));
    }
    let sse: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    #[default]
    Absolute,
    Signed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDistribution {
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
}

impl ErrorDistribution {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("error distribution needs samples"));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let variance = if samples.len() > 1 {
            samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        if !mean.is_finite() || !variance.is_finite() {
            return Err(Error::Numerical("error distribution has non-finite moments".into()));
        }
        Ok(Self { samples, mean, variance })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Pools per-day forecast draws into `total` error samples, spreading the
/// quota evenly over days (earlier days take the remainder) and cycling
/// through each day's draws.
pub fn build_error_distribution(
    draws: &[Vec<f64>],
    actual: &[f64],
    total: usize,
    kind: ErrorKind,
) -> Result<ErrorDistribution> {
    if draws.len() != actual.len() {
        return Err(Error::dim(actual.len(), draws.len()));
    }
    if draws.is_empty() || draws.iter().any(Vec::is_empty) {
        return Err(Error::invalid("forecast run has no draws"));
    }
    let days = draws.len();
    let mut samples = Vec::with_capacity(total);
    for (day, (day_draws, &truth)) in draws.iter().zip(actual).enumerate() {
        let quota = total / days + usize::from(day < total % days);
        for i in 0..quota {
            let err = day_draws[i % day_draws.len()] - truth;
            samples.push(match kind {
                ErrorKind::Absolute => err.abs(),
                ErrorKind::Signed => err,
            });
        }
    }
    ErrorDistribution::from_samples(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZDenominator {
    /// `sqrt(var_pop + var_sample)`.
    #[default]
    SummedVariance,
    /// `sqrt(var_pop / n_pop + var_sample / n_sample)`.
    StandardError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub z: f64,
    /// One-sided: small when the sample errors are lower than the
    /// population's.
    pub p: f64,
    pub stars: String,
}

/// `"‡"` for p < .01, `"†"` for p < .05, `"*"` for p < .2, otherwise empty.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "‡"
    } else if p < 0.05 {
        "†"
    } else if p < 0.2 {
        "*"
    } else {
        ""
    }
}

pub fn z_score(pop_mean: f64, pop_var: f64, sample_mean: f64, sample_var: f64) -> Result<f64> {
    let denom = (pop_var + sample_var).sqrt();
    if !(denom > 0.0) {
        return Err(Error::Numerical("combined variance is zero".into()));
    }
    Ok((pop_mean - sample_mean) / denom)
}

pub fn significance(z: f64) -> SignificanceReport {
    let p = normal_cdf(-z);
    SignificanceReport {
        z,
        p,
        stars: stars(p).to_string(),
    }
}

/// Tests whether `sample` (e.g. a covariate-augmented forecast) has lower
/// errors than `pop` (the univariate reference).
pub fn z_test(pop: &ErrorDistribution, sample: &ErrorDistribution, denominator: ZDenominator) -> Result<SignificanceReport> {
    if pop.len() < 2 || sample.len() < 2 {
        return Err(Error::invalid("z-test needs at least 2 samples per distribution"));
    }
    let (vp, vs) = match denominator {
        ZDenominator::SummedVariance => (pop.variance, sample.variance),
        ZDenominator::StandardError => (pop.variance / pop.len() as f64, sample.variance / sample.len() as f64),
    };
    Ok(significance(z_score(pop.mean, vp, sample.mean, vs)?))
}
