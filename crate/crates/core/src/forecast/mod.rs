//! Caseload forecasting on the differenced series: martingale baseline,
//! Gaussian process and transformer, plus the covariate ablation harness.

mod gp;
mod transformer;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{f_regression_select, FeatureTable, DEFAULT_TOP};
use crate::ingest::{DailySeries, DateRange};
use crate::stats::{rmse, SignificanceReport};

pub use gp::{rbf, GpHyper, GpModel, GpParams, NOISE_FLOOR};
pub use transformer::{positional_encoding, Block, Layout, TransformerModel, TransformerParams, Window};

pub const HORIZONS: [usize; 3] = [7, 14, 21];
pub const DEFAULT_DRAWS: usize = 200;

/// `out[t] = s[t+1] - s[t]`, dated from the second day of `s`.
pub fn difference(s: &DailySeries) -> Result<DailySeries> {
    if s.len() < 2 {
        return Err(Error::invalid("differencing needs at least 2 values"));
    }
    let values = s.values.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(s.with_values(format!("{}_diff", s.name), s.start + Duration::days(1), values))
}

/// Inverse of [`difference`]: cumulative sum seeded with the first level.
pub fn undifference(first: f64, diffs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(diffs.len() + 1);
    out.push(first);
    let mut acc = first;
    for d in diffs {
        acc += d;
        out.push(acc);
    }
    out
}

/// Column-wise affine map of the training range onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::invalid("cannot fit a scaler on zero rows"));
        }
        let mut min = Vec::with_capacity(x.ncols());
        let mut max = Vec::with_capacity(x.ncols());
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Validation(format!("column {j} has non-finite values")));
            }
            if lo == hi {
                log::warn!("column {j} is constant on the training rows; scaling it to 0.5");
            }
            min.push(lo);
            max.push(hi);
        }
        Ok(Self { min, max })
    }

    pub fn fit_values(v: &[f64]) -> Result<Self> {
        Self::fit(ArrayView2::from_shape((v.len(), 1), v).map_err(|e| Error::invalid(e.to_string()))?)
    }

    pub fn transform_value(&self, col: usize, v: f64) -> f64 {
        let span = self.max[col] - self.min[col];
        if span == 0.0 {
            0.5
        } else {
            (v - self.min[col]) / span
        }
    }

    pub fn inverse_value(&self, col: usize, v: f64) -> f64 {
        let span = self.max[col] - self.min[col];
        if span == 0.0 {
            self.min[col]
        } else {
            self.min[col] + v * span
        }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.min.len() {
            return Err(Error::dim(self.min.len(), x.ncols()));
        }
        Ok(Array2::from_shape_fn(x.dim(), |(i, j)| self.transform_value(j, x[[i, j]])))
    }

    pub fn inverse_transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.min.len() {
            return Err(Error::dim(self.min.len(), x.ncols()));
        }
        Ok(Array2::from_shape_fn(x.dim(), |(i, j)| self.inverse_value(j, x[[i, j]])))
    }
}

/// Fits on `train` and applies the same map to both matrices.
pub fn minmax_fit_apply(train: ArrayView2<f64>, test: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>, MinMaxScaler)> {
    let scaler = MinMaxScaler::fit(train)?;
    Ok((scaler.transform(train)?, scaler.transform(test)?, scaler))
}

/// Persistence forecast: the value at `t` is predicted to be `mu[t - T]`.
/// The first `T` days have no forecast (NaN).
pub fn martingale_forecast(mu: &DailySeries, horizon: usize) -> DailySeries {
    let values = (0..mu.len())
        .map(|t| if t >= horizon { mu.values[t - horizon] } else { f64::NAN })
        .collect();
    mu.with_values(format!("{}_martingale{horizon}", mu.name), mu.start, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Martingale,
    Gp,
    Transformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Martingale, ModelKind::Gp, ModelKind::Transformer];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Martingale => "martingale",
            ModelKind::Gp => "gp",
            ModelKind::Transformer => "transformer",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One forecasting setup. Models see the target and covariates up to the
/// forecast origin and predict the target `horizon` days later. Training
/// pairs have their target day on or before `train_end`; test pairs have it
/// inside `test`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastProblem {
    pub region: String,
    /// Daily increase in caseload.
    pub target: DailySeries,
    /// Same days as `target`, or `None` for a univariate run.
    pub covariates: Option<FeatureTable>,
    pub context_len: usize,
    pub horizon: usize,
    pub train_end: NaiveDate,
    pub test: DateRange,
}

struct Prepared {
    y: Vec<f64>,
    cov: Option<Array2<f64>>,
    y_scaler: MinMaxScaler,
    train_origins: Vec<usize>,
    test_days: Vec<usize>,
}

impl ForecastProblem {
    pub fn new(
        target: DailySeries,
        covariates: Option<FeatureTable>,
        context_len: usize,
        horizon: usize,
        train_end: NaiveDate,
        test: DateRange,
    ) -> Result<Self> {
        if target.has_gaps() {
            return Err(Error::Validation(format!("target `{}` has gaps", target.name)));
        }
        if horizon == 0 || context_len == 0 {
            return Err(Error::invalid("horizon and context length must be positive"));
        }
        if let Some(c) = &covariates {
            if c.start != target.start || c.n_days() != target.len() {
                return Err(Error::invalid("covariates must cover exactly the target's days"));
            }
        }
        if train_end < target.start || train_end >= test.start || test.end > target.end() {
            return Err(Error::invalid(format!(
                "train end {train_end} and test {}..{} must be ordered inside {}..{}",
                test.start,
                test.end,
                target.start,
                target.end()
            )));
        }
        Ok(Self {
            region: target.region.clone(),
            target,
            covariates,
            context_len,
            horizon,
            train_end,
            test,
        })
    }

    fn index(&self, day: NaiveDate) -> usize {
        (day - self.target.start).num_days() as usize
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.as_ref().map_or(0, FeatureTable::n_features)
    }

    /// Forecast origins whose target day falls in the training period.
    pub fn train_origins(&self) -> Vec<usize> {
        let last = self.index(self.train_end);
        let first = self.context_len - 1;
        if last < first + self.horizon {
            return Vec::new();
        }
        (first..=last - self.horizon).collect()
    }

    /// Test target days (as indices) that have a full context before them.
    pub fn test_days(&self) -> Vec<usize> {
        (self.index(self.test.start)..=self.index(self.test.end))
            .filter(|&d| d >= self.horizon + self.context_len - 1)
            .collect()
    }

    /// Scales target and covariates with maps fitted on training days only.
    fn prepare(&self) -> Result<Prepared> {
        let train_last = self.index(self.train_end);
        let y_scaler = MinMaxScaler::fit_values(&self.target.values[..=train_last])?;
        let y = self.target.values.iter().map(|&v| y_scaler.transform_value(0, v)).collect();
        let cov = match &self.covariates {
            Some(c) if c.n_features() > 0 => {
                let scaler = MinMaxScaler::fit(c.values.slice(ndarray::s![..=train_last, ..]))?;
                Some(scaler.transform(c.values.view())?)
            }
            _ => None,
        };
        let train_origins = self.train_origins();
        let test_days = self.test_days();
        if test_days.is_empty() {
            return Err(Error::invalid("no test day has a full context window"));
        }
        Ok(Prepared {
            y,
            cov,
            y_scaler,
            train_origins,
            test_days,
        })
    }
}

impl Prepared {
    fn n_inputs(&self) -> usize {
        1 + self.cov.as_ref().map_or(0, |c| c.ncols())
    }

    fn window_inputs(&self, origin: usize, len: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(len * self.n_inputs());
        for p in origin + 1 - len..=origin {
            out.push(self.y[p]);
            if let Some(c) = &self.cov {
                out.extend(c.row(p).iter());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub horizons: Vec<usize>,
    pub models: Vec<ModelKind>,
    /// Predictive draws per test day.
    pub n_draws: usize,
    /// Covariates kept per set by f-regression.
    pub top: usize,
    pub gp: GpParams,
    pub transformer: TransformerParams,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            horizons: HORIZONS.to_vec(),
            models: ModelKind::ALL.to_vec(),
            n_draws: DEFAULT_DRAWS,
            top: DEFAULT_TOP,
            gp: GpParams::default(),
            transformer: TransformerParams::default(),
        }
    }
}

/// Test-period forecasts of one model on one covariate set, on the scaled
/// differenced target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRun {
    pub model: ModelKind,
    pub set: String,
    pub horizon: usize,
    pub region: String,
    pub seed: u64,
    pub days: Vec<NaiveDate>,
    pub actual: Vec<f64>,
    pub mean: Vec<f64>,
    pub draws: Vec<Vec<f64>>,
    pub rmse: f64,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelKind,
    pub set: String,
    pub horizon: usize,
    pub state: String,
    pub seed: u64,
    pub rmse: f64,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stars: Option<String>,
}

impl ForecastRun {
    pub fn record(&self, significance: Option<&SignificanceReport>) -> RunRecord {
        RunRecord {
            model: self.model,
            set: self.set.clone(),
            horizon: self.horizon,
            state: self.region.clone(),
            seed: self.seed,
            rmse: self.rmse,
            n_samples: self.draws.first().map_or(0, Vec::len),
            z: significance.map(|s| s.z),
            p: significance.map(|s| s.p),
            stars: significance.map(|s| s.stars.clone()),
        }
    }

    /// Per-day CSV: date, actual, mean and the 5%/95% draw quantiles.
    pub fn write_predictions_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["date", "actual", "mean", "q05", "q95"])?;
        for (i, day) in self.days.iter().enumerate() {
            let mut d = self.draws[i].clone();
            d.sort_by(f64::total_cmp);
            let q = |p: f64| d[((d.len() - 1) as f64 * p).round() as usize];
            w.write_record([
                day.format("%Y-%m-%d").to_string(),
                self.actual[i].to_string(),
                self.mean[i].to_string(),
                q(0.05).to_string(),
                q(0.95).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_runs_jsonl(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Fits `model` on the problem's training pairs and forecasts every test
/// day. `set` only labels the run.
pub fn run_model(problem: &ForecastProblem, model: ModelKind, set: &str, config: &ForecastConfig, seed: u64) -> Result<ForecastRun> {
    let prep = problem.prepare()?;
    let h = problem.horizon;
    let actual: Vec<f64> = prep.test_days.iter().map(|&d| prep.y[d]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA076_1D64_78BD_642F);
    let (mean, draws): (Vec<f64>, Vec<Vec<f64>>) = match model {
        ModelKind::Martingale => {
            let zero = prep.y_scaler.transform_value(0, 0.0);
            (vec![zero; actual.len()], vec![vec![zero; config.n_draws]; actual.len()])
        }
        ModelKind::Gp => {
            let origins = &prep.train_origins;
            if origins.len() < 10 {
                return Err(Error::invalid(format!("GP needs at least 10 training rows, have {}", origins.len())));
            }
            let (o_lo, o_hi) = (origins[0] as f64, *origins.last().unwrap() as f64);
            let span = (o_hi - o_lo).max(1.0);
            let input = |o: usize| {
                let mut row = vec![(o as f64 - o_lo) / span];
                if let Some(c) = &prep.cov {
                    row.extend(c.row(o).iter());
                }
                row
            };
            let x: Vec<Vec<f64>> = origins.iter().map(|&o| input(o)).collect();
            let y_raw: Vec<f64> = origins.iter().map(|&o| prep.y[o + h]).collect();
            let offset = y_raw.iter().sum::<f64>() / y_raw.len() as f64;
            let y: Vec<f64> = y_raw.iter().map(|v| v - offset).collect();
            let gp = GpModel::fit(&x, &y, &config.gp)?;
            let queries: Vec<Vec<f64>> = prep.test_days.iter().map(|&d| input(d - h)).collect();
            gp.predict(&queries)
                .into_iter()
                .map(|(m, v)| (m + offset, gp.draws(m + offset, v, config.n_draws, &mut rng)))
                .unzip()
        }
        ModelKind::Transformer => {
            let len = config.transformer.context_len;
            if len != problem.context_len {
                return Err(Error::invalid(format!(
                    "transformer context {len} differs from the problem's {}",
                    problem.context_len
                )));
            }
            let windows: Vec<Window> = prep
                .train_origins
                .iter()
                .map(|&o| Window {
                    inputs: prep.window_inputs(o, len),
                    targets: prep.y[o + 1..=o + h].to_vec(),
                })
                .collect();
            let net = TransformerModel::fit(&windows, prep.n_inputs(), h, &config.transformer, seed)?;
            prep.test_days
                .iter()
                .map(|&d| {
                    let point = net.predict(&prep.window_inputs(d - h, len))[h - 1];
                    (point, net.draws(point, config.n_draws, &mut rng))
                })
                .unzip()
        }
    };
    let rmse = rmse(&mean, &actual)?;
    Ok(ForecastRun {
        model,
        set: set.to_string(),
        horizon: h,
        region: problem.region.clone(),
        seed,
        days: prep.test_days.iter().map(|&d| problem.target.start + Duration::days(d as i64)).collect(),
        actual,
        mean,
        draws,
        rmse,
    })
}

/// A named union of covariate groups; the empty set is the univariate run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSet {
    pub label: String,
    pub groups: Vec<String>,
}

impl CovariateSet {
    pub fn univariate() -> Self {
        Self {
            label: "uni".into(),
            groups: Vec::new(),
        }
    }

    pub fn of(groups: &[&str]) -> Self {
        if groups.is_empty() {
            return Self::univariate();
        }
        Self {
            label: groups.iter().map(|g| format!("+{g}")).collect(),
            groups: groups.iter().map(|g| g.to_string()).collect(),
        }
    }

    /// Univariate, each group alone, every pair, and all three.
    pub fn standard(text: &str, mobility: &str, government: &str) -> Vec<Self> {
        [
            vec![],
            vec![text],
            vec![mobility],
            vec![government],
            vec![text, mobility],
            vec![text, government],
            vec![mobility, government],
            vec![text, mobility, government],
        ]
        .iter()
        .map(|g| Self::of(g))
        .collect()
    }
}

/// Inputs to the ablation grid for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationData {
    pub region: String,
    /// Daily increase in caseload.
    pub target: DailySeries,
    /// Covariate groups keyed by tag, each covering the target's days.
    pub groups: BTreeMap<String, FeatureTable>,
    pub train_end: NaiveDate,
    pub test: DateRange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    /// Ordered by horizon, then model, then set.
    pub runs: Vec<ForecastRun>,
    /// Distinct model fits performed (the martingale is shared by all sets).
    pub fits: usize,
}

impl AblationData {
    /// The problem for one set and horizon, with the set's covariates
    /// reduced to the `top` best by f-regression against the target at the
    /// horizon over the training pairs.
    pub fn problem(&self, set: &CovariateSet, horizon: usize, config: &ForecastConfig) -> Result<ForecastProblem> {
        let context = config.transformer.context_len;
        let bare = ForecastProblem::new(self.target.clone(), None, context, horizon, self.train_end, self.test)?;
        if set.groups.is_empty() {
            return Ok(bare);
        }
        let tables = set
            .groups
            .iter()
            .map(|g| {
                self.groups
                    .get(g)
                    .ok_or_else(|| Error::invalid(format!("covariate group `{g}` is missing for set `{}`", set.label)))
            })
            .collect::<Result<Vec<_>>>()?;
        let all = FeatureTable::concat(&tables)?;
        let origins = bare.train_origins();
        let train = FeatureTable::new(
            all.region.clone(),
            all.start,
            all.names.clone(),
            all.values.select(Axis(0), &origins),
        )?;
        let y: Vec<f64> = origins.iter().map(|&o| self.target.values[o + horizon]).collect();
        let kept = f_regression_select(&train, &y, config.top)?.names();
        ForecastProblem::new(self.target.clone(), Some(all.select(&kept)?), context, horizon, self.train_end, self.test)
    }
}

/// Runs every model × set × horizon combination. The martingale ignores
/// covariates, so it is fitted once per horizon and reported under every set.
pub fn ablation_run(data: &AblationData, sets: &[CovariateSet], config: &ForecastConfig, seed: u64) -> Result<AblationOutcome> {
    struct Job<'a> {
        horizon: usize,
        model: ModelKind,
        sets: Vec<&'a CovariateSet>,
    }
    if sets.is_empty() {
        return Err(Error::invalid("no covariate sets"));
    }
    let mut jobs = Vec::new();
    for &horizon in &config.horizons {
        for &model in &config.models {
            if model == ModelKind::Martingale {
                jobs.push(Job {
                    horizon,
                    model,
                    sets: sets.iter().collect(),
                });
            } else {
                jobs.extend(sets.iter().map(|s| Job {
                    horizon,
                    model,
                    sets: vec![s],
                }));
            }
        }
    }
    let fits = jobs.len();
    let results: Vec<Result<Vec<ForecastRun>>> = jobs
        .par_iter()
        .map(|job| {
            let first = job.sets[0];
            let label = || format!("forecast {} {} T={} {}", job.model, first.label, job.horizon, data.region);
            let problem = if job.model == ModelKind::Martingale {
                data.problem(&CovariateSet::univariate(), job.horizon, config)
            } else {
                data.problem(first, job.horizon, config)
            }
            .map_err(|e| e.in_stage(&label()))?;
            let run_seed = seed.wrapping_add(job.horizon as u64);
            let run = run_model(&problem, job.model, &first.label, config, run_seed).map_err(|e| e.in_stage(&label()))?;
            Ok(job
                .sets
                .iter()
                .map(|s| ForecastRun {
                    set: s.label.clone(),
                    ..run.clone()
                })
                .collect())
        })
        .collect();
    let mut runs = Vec::new();
    for r in results {
        runs.extend(r?);
    }
    Ok(AblationOutcome { runs, fits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d0() -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 3, 7).unwrap()
    }

    #[test]
    fn cumulative_series_differences() {
        let s = DailySeries::new("WA", "c", d0(), vec![0.0, 1.0, 3.0, 6.0]);
        let d = difference(&s).unwrap();
        assert_eq!(d.values, vec![1.0, 2.0, 3.0]);
        assert_eq!(d.start, d0() + Duration::days(1));
        assert_eq!(undifference(0.0, &d.values), s.values);
    }

    #[test]
    fn constant_series_differences_to_zero() {
        let s = DailySeries::new("WA", "c", d0(), vec![4.0; 6]);
        assert!(difference(&s).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(difference(&DailySeries::new("WA", "c", d0(), vec![1.0])).is_err());
    }

    #[test]
    fn minmax_uses_train_range() {
        let train = ndarray::array![[0.0, 3.0], [10.0, 3.0]];
        let test = ndarray::array![[20.0, 5.0]];
        let (tr, te, s) = minmax_fit_apply(train.view(), test.view()).unwrap();
        assert_eq!(tr, ndarray::array![[0.0, 0.5], [1.0, 0.5]]);
        assert_eq!(te[[0, 0]], 2.0);
        assert_eq!(te[[0, 1]], 0.5);
        assert_eq!(s.inverse_value(0, 2.0), 20.0);
    }

    #[test]
    fn martingale_repeats_the_value_t_days_back() {
        let s = DailySeries::new("WA", "mu", d0(), (0..20).map(|i| (i * i) as f64).collect());
        let f = martingale_forecast(&s, 7);
        assert!(f.values[..7].iter().all(|v| v.is_nan()));
        for t in 7..20 {
            assert_eq!(f.values[t], s.values[t - 7]);
        }
    }

    #[test]
    fn standard_sets_have_eight_labels() {
        let sets = CovariateSet::standard("T_RoB", "M", "G");
        let labels: Vec<&str> = sets.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(
            labels,
            ["uni", "+T_RoB", "+M", "+G", "+T_RoB+M", "+T_RoB+G", "+M+G", "+T_RoB+M+G"]
        );
    }

    #[test]
    fn problem_rejects_misordered_ranges() {
        let s = DailySeries::new("WA", "y", d0(), vec![0.0; 100]);
        let test = DateRange::new(d0() + Duration::days(50), d0() + Duration::days(99)).unwrap();
        assert!(ForecastProblem::new(s.clone(), None, 28, 7, d0() + Duration::days(60), test).is_err());
        assert!(ForecastProblem::new(s, None, 28, 7, d0() + Duration::days(49), test).is_ok());
    }
}
