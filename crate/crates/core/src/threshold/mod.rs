//! Threshold classification: does the 7-day-average caseload rise by at
//! least a relative margin `m` within `tau` days?

mod forest;

use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{chi2_select, FeatureTable, DEFAULT_TOP};
use crate::ingest::DailySeries;

pub use forest::{DecisionTree, ForestModel, ForestParams, TreeNode};

pub const DEFAULT_TAUS: [usize; 4] = [7, 14, 21, 28];
pub const DEFAULT_MARGINS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const TEST_FRACTION: f64 = 0.25;

/// Prediction horizon and relative threshold. A day is positive when
/// `(mu(t + tau) - mu(t)) / mu(t) >= m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub tau: usize,
    pub m: f64,
}

impl ThresholdSpec {
    pub fn new(tau: usize, m: f64) -> Result<Self> {
        if tau == 0 {
            return Err(Error::invalid("tau must be positive"));
        }
        if !(m > 0.0) {
            return Err(Error::invalid("threshold m must be positive"));
        }
        Ok(Self { tau, m })
    }

    pub fn relative_increase(now: f64, later: f64) -> f64 {
        (later - now) / now
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayLabel {
    /// Offset of the day within the caseload series.
    pub index: usize,
    pub day: NaiveDate,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayLabels {
    pub labels: Vec<DayLabel>,
    /// Days skipped because `mu(t) = 0`.
    pub zero_days: usize,
}

pub fn label_days(mu: &DailySeries, spec: &ThresholdSpec) -> DayLabels {
    let n = mu.len();
    let mut labels = Vec::new();
    let mut zero_days = 0;
    for t in 0..n.saturating_sub(spec.tau) {
        let now = mu.values[t];
        if now == 0.0 {
            zero_days += 1;
            continue;
        }
        let delta = ThresholdSpec::relative_increase(now, mu.values[t + spec.tau]);
        labels.push(DayLabel {
            index: t,
            day: mu.start + chrono::Duration::days(t as i64),
            label: u8::from(delta >= spec.m),
        });
    }
    if zero_days > 0 {
        log::warn!("{zero_days} day(s) with zero caseload excluded from labelling");
    }
    DayLabels { labels, zero_days }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub day: NaiveDate,
    pub features: Vec<f64>,
    pub label: u8,
}

/// Joins feature rows (same day) to labels. Days without a feature row are
/// skipped.
pub fn join_rows(table: &FeatureTable, labels: &DayLabels) -> Vec<LabeledRow> {
    labels
        .labels
        .iter()
        .filter_map(|l| {
            let off = (l.day - table.start).num_days();
            (off >= 0 && (off as usize) < table.n_days()).then(|| LabeledRow {
                day: l.day,
                features: table.values.row(off as usize).to_vec(),
                label: l.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Uniformly random day-level assignment.
    #[default]
    Random,
    /// Earliest 75% of the balanced days train, the rest test.
    Chronological,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDataset {
    pub feature_names: Vec<String>,
    pub rows: Vec<LabeledRow>,
    pub split: Vec<Split>,
    pub seed: u64,
}

impl ThresholdDataset {
    pub fn part(&self, which: Split) -> impl Iterator<Item = &LabeledRow> {
        self.rows.iter().zip(&self.split).filter(move |(_, s)| **s == which).map(|(r, _)| r)
    }

    pub fn n_train(&self) -> usize {
        self.split.iter().filter(|s| **s == Split::Train).count()
    }

    pub fn n_test(&self) -> usize {
        self.split.iter().filter(|s| **s == Split::Test).count()
    }
}

/// Undersamples the majority class to the minority size, then assigns a
/// quarter of the rows (rounded up) to the test split.
pub fn balance_and_split(
    rows: Vec<LabeledRow>,
    feature_names: Vec<String>,
    seed: u64,
    mode: SplitMode,
) -> Result<ThresholdDataset> {
    let (mut pos, mut neg): (Vec<LabeledRow>, Vec<LabeledRow>) = rows.into_iter().partition(|r| r.label == 1);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(format!(
            "both classes are needed ({} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = pos.len().min(neg.len());
    for class in [&mut pos, &mut neg] {
        if class.len() > keep {
            class.shuffle(&mut rng);
            class.truncate(keep);
        }
    }
    let mut rows: Vec<LabeledRow> = pos.into_iter().chain(neg).collect();
    rows.sort_by_key(|r| r.day);
    let n = rows.len();
    let n_test = (n as f64 * TEST_FRACTION).ceil() as usize;
    let mut split = vec![Split::Train; n];
    match mode {
        SplitMode::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for &i in &order[..n_test] {
                split[i] = Split::Test;
            }
        }
        SplitMode::Chronological => {
            for s in split.iter_mut().skip(n - n_test) {
                *s = Split::Test;
            }
        }
    }
    Ok(ThresholdDataset {
        feature_names,
        rows,
        split,
        seed,
    })
}

pub fn train_forest(ds: &ThresholdDataset, params: &ForestParams) -> Result<ForestModel> {
    let train: Vec<&LabeledRow> = ds.part(Split::Train).collect();
    if train.len() < 10 {
        return Err(Error::invalid(format!("need at least 10 training rows, have {}", train.len())));
    }
    let x: Vec<&[f64]> = train.iter().map(|r| r.features.as_slice()).collect();
    let y: Vec<u8> = train.iter().map(|r| r.label).collect();
    ForestModel::fit(&x, &y, ds.feature_names.clone(), params, ds.seed)
}

/// Test-split accuracy of the majority vote (ties vote 0).
pub fn evaluate(model: &ForestModel, ds: &ThresholdDataset) -> Result<f64> {
    let test: Vec<&LabeledRow> = ds.part(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::invalid("dataset has no test rows"));
    }
    let correct = test.iter().filter(|r| model.predict(&r.features) == r.label).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Sums normalised per-feature Gini importances by group tag.
pub fn grouped_importance(model: &ForestModel, groups: &HashMap<String, String>) -> Result<BTreeMap<String, f64>> {
    if let Some(unknown) = groups.keys().find(|k| !model.feature_names.contains(k)) {
        return Err(Error::invalid(format!("group map names unknown feature `{unknown}`")));
    }
    let importances = model.feature_importances();
    let mut out = BTreeMap::new();
    for (name, imp) in model.feature_names.iter().zip(importances) {
        let group = groups
            .get(name)
            .ok_or_else(|| Error::invalid(format!("feature `{name}` has no group")))?;
        *out.entry(group.clone()).or_insert(0.0) += imp;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdEval {
    /// Features kept by chi-squared selection on the training rows.
    pub top: usize,
    pub forest: ForestParams,
    pub split: SplitMode,
}

impl Default for ThresholdEval {
    fn default() -> Self {
        Self {
            top: DEFAULT_TOP,
            forest: ForestParams::default(),
            split: SplitMode::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOutcome {
    pub spec: ThresholdSpec,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub selected: Vec<String>,
    /// Normalised Gini importance of each selected feature.
    pub importances: Vec<f64>,
}

/// Labels days from `mu`, balances and splits them, keeps the `top`
/// chi-squared features of the training rows, fits the forest and scores
/// the test rows. Columns with negative entries are shifted by their
/// training minimum before scoring.
pub fn evaluate_threshold(
    mu: &DailySeries,
    table: &FeatureTable,
    spec: &ThresholdSpec,
    eval: &ThresholdEval,
    seed: u64,
) -> Result<ThresholdOutcome> {
    let rows = join_rows(table, &label_days(mu, spec));
    let ds = balance_and_split(rows, table.names.clone(), seed, eval.split)?;
    let train: Vec<&LabeledRow> = ds.part(Split::Train).collect();
    let mut values = ndarray::Array2::from_shape_fn((train.len(), table.n_features()), |(i, j)| train[i].features[j]);
    for mut col in values.columns_mut() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        if lo < 0.0 {
            col.mapv_inplace(|v| v - lo);
        }
    }
    let labels: Vec<u8> = train.iter().map(|r| r.label).collect();
    let scored = FeatureTable::new(table.region.clone(), table.start, table.names.clone(), values)?;
    let selected = chi2_select(&scored, &labels, eval.top)?.names();
    let idx: Vec<usize> = selected
        .iter()
        .map(|n| table.names.iter().position(|m| m == n).expect("selected from this table"))
        .collect();
    let reduced = ThresholdDataset {
        feature_names: selected.clone(),
        rows: ds
            .rows
            .iter()
            .map(|r| LabeledRow {
                day: r.day,
                features: idx.iter().map(|&j| r.features[j]).collect(),
                label: r.label,
            })
            .collect(),
        split: ds.split.clone(),
        seed,
    };
    let model = train_forest(&reduced, &eval.forest)?;
    Ok(ThresholdOutcome {
        spec: *spec,
        accuracy: evaluate(&model, &reduced)?,
        n_train: reduced.n_train(),
        n_test: reduced.n_test(),
        selected,
        importances: model.feature_importances(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d0() -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 3, 7).unwrap()
    }

    #[test]
    fn doubling_sits_on_the_boundary() {
        let mu = DailySeries::new("WA", "mu", d0(), vec![100.0, 150.0, 200.0]);
        let l = label_days(&mu, &ThresholdSpec::new(2, 1.0).unwrap());
        assert_eq!(l.labels.len(), 1);
        assert_eq!(l.labels[0].label, 1);
    }

    #[test]
    fn flat_caseload_is_negative() {
        let mu = DailySeries::new("WA", "mu", d0(), vec![50.0; 10]);
        let l = label_days(&mu, &ThresholdSpec::new(7, 0.01).unwrap());
        assert_eq!(l.labels.len(), 3);
        assert!(l.labels.iter().all(|d| d.label == 0));
    }

    #[test]
    fn zero_caseload_days_are_counted_and_dropped() {
        let mu = DailySeries::new("WA", "mu", d0(), vec![0.0, 0.0, 5.0, 10.0]);
        let l = label_days(&mu, &ThresholdSpec::new(1, 0.5).unwrap());
        assert_eq!(l.zero_days, 2);
        assert_eq!(l.labels.len(), 1);
    }

    fn rows(pos: usize, neg: usize) -> Vec<LabeledRow> {
        (0..pos + neg)
            .map(|i| LabeledRow {
                day: d0() + chrono::Duration::days(i as i64),
                features: vec![i as f64],
                label: u8::from(i < pos),
            })
            .collect()
    }

    #[test]
    fn sixty_forty_balances_to_eighty() {
        let ds = balance_and_split(rows(60, 40), vec!["f".into()], 1, SplitMode::Random).unwrap();
        assert_eq!(ds.rows.len(), 80);
        assert_eq!(ds.rows.iter().filter(|r| r.label == 1).count(), 40);
        assert_eq!(ds.n_train(), 60);
        assert_eq!(ds.n_test(), 20);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let a = balance_and_split(rows(30, 50), vec!["f".into()], 9, SplitMode::Random).unwrap();
        let b = balance_and_split(rows(30, 50), vec!["f".into()], 9, SplitMode::Random).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chronological_split_tests_the_latest_days() {
        let ds = balance_and_split(rows(10, 10), vec!["f".into()], 1, SplitMode::Chronological).unwrap();
        let last_train = ds.part(Split::Train).map(|r| r.day).max().unwrap();
        let first_test = ds.part(Split::Test).map(|r| r.day).min().unwrap();
        assert!(last_train < first_test);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(balance_and_split(rows(5, 0), vec!["f".into()], 1, SplitMode::Random).is_err());
    }
}
