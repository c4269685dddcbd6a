//! Daily count features from cluster assignments and text, and univariate
//! feature selection (chi-squared for class targets, f-regression for
//! continuous ones).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::gamma_ur;

use crate::cluster::NOISE;
use crate::error::{Error, Result};
use crate::ingest::{DailySeries, DateRange, PostRecord};

pub const DEFAULT_TOP: usize = 25;

/// Day×feature matrix over consecutive days starting at `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub region: String,
    pub start: NaiveDate,
    pub names: Vec<String>,
    pub values: Array2<f64>,
}

impl FeatureTable {
    pub fn new(region: impl Into<String>, start: NaiveDate, names: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(Error::dim(names.len(), values.ncols()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("feature table has non-finite entries".into()));
        }
        Ok(Self {
            region: region.into(),
            start,
            names,
            values,
        })
    }

    pub fn n_days(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn day(&self, row: usize) -> NaiveDate {
        self.start + Duration::days(row as i64)
    }

    pub fn column(&self, name: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.names.iter().position(|n| n == name).map(|j| self.values.column(j))
    }

    /// Keeps the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<FeatureTable> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| Error::invalid(format!("unknown feature `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(FeatureTable {
            region: self.region.clone(),
            start: self.start,
            names: names.to_vec(),
            values: self.values.select(Axis(1), &idx),
        })
    }

    /// Rows for the days in `range`, which must lie inside the table.
    pub fn slice_days(&self, range: &DateRange) -> Result<FeatureTable> {
        let first = (range.start - self.start).num_days();
        let last = (range.end - self.start).num_days();
        if first < 0 || last as usize >= self.n_days() {
            return Err(Error::invalid(format!("range {}..{} outside feature table", range.start, range.end)));
        }
        Ok(FeatureTable {
            region: self.region.clone(),
            start: range.start,
            names: self.names.clone(),
            values: self.values.slice(ndarray::s![first as usize..=last as usize, ..]).to_owned(),
        })
    }

    /// Column-wise concatenation of tables covering the same days.
    pub fn concat(tables: &[&FeatureTable]) -> Result<FeatureTable> {
        let first = tables.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut names = Vec::new();
        let mut cols = Vec::new();
        for t in tables {
            if t.start != first.start || t.n_days() != first.n_days() {
                return Err(Error::invalid("feature tables cover different days"));
            }
            names.extend(t.names.iter().cloned());
            cols.push(t.values.view());
        }
        let values = if cols.is_empty() {
            Array2::zeros((first.n_days(), 0))
        } else {
            ndarray::concatenate(Axis(1), &cols).map_err(|e| Error::invalid(e.to_string()))?
        };
        FeatureTable::new(first.region.clone(), first.start, names, values)
    }

    pub fn from_series(series: &[&DailySeries]) -> Result<FeatureTable> {
        let first = series.first().ok_or_else(|| Error::invalid("no series"))?;
        let n = first.len();
        let mut values = Array2::zeros((n, series.len()));
        for (j, s) in series.iter().enumerate() {
            if s.start != first.start || s.len() != n {
                return Err(Error::invalid(format!("series `{}` is not aligned", s.name)));
            }
            for (i, v) in s.values.iter().enumerate() {
                values[[i, j]] = *v;
            }
        }
        FeatureTable::new(first.region.clone(), first.start, series.iter().map(|s| s.name.clone()).collect(), values)
    }

    /// Applies a trailing moving average to every column.
    pub fn moving_average(&self, w: usize) -> FeatureTable {
        let mut out = self.values.clone();
        for (j, col) in self.values.axis_iter(Axis(1)).enumerate() {
            let smoothed = trailing_mean(col.iter().copied(), w);
            for (i, v) in smoothed.into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        FeatureTable {
            values: out,
            ..self.clone()
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        wtr.write_record(&header)?;
        for (i, row) in self.values.axis_iter(Axis(0)).enumerate() {
            let mut rec = vec![self.day(i).format("%Y-%m-%d").to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, region: &str) -> Result<FeatureTable> {
        let mut rdr = csv::Reader::from_path(path)?;
        let names: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut start = None;
        let mut flat = Vec::new();
        let mut rows = 0;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |m: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: m,
            };
            let day = NaiveDate::parse_from_str(rec.get(0).unwrap_or(""), "%Y-%m-%d").map_err(|e| bad(e.to_string()))?;
            let start = *start.get_or_insert(day);
            if day != start + Duration::days(rows as i64) {
                return Err(bad("rows are not consecutive days".into()));
            }
            for field in rec.iter().skip(1) {
                flat.push(field.parse::<f64>().map_err(|e| bad(e.to_string()))?);
            }
            rows += 1;
        }
        let start = start.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "no rows".into(),
        })?;
        let values = Array2::from_shape_vec((rows, names.len()), flat).map_err(|e| Error::invalid(e.to_string()))?;
        FeatureTable::new(region, start, names, values)
    }
}

pub fn cluster_feature_name(id: i32) -> String {
    format!("c{id}")
}

/// One column per cluster: the number of that day's posts in the cluster.
/// Noise posts are ignored.
pub fn daily_cluster_counts(posts: &[PostRecord], labels: &[i32], range: &DateRange, region: &str) -> Result<FeatureTable> {
    if posts.len() != labels.len() {
        return Err(Error::dim(posts.len(), labels.len()));
    }
    let ids: Vec<i32> = {
        let mut ids: Vec<i32> = labels.iter().copied().filter(|&l| l != NOISE).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let col: HashMap<i32, usize> = ids.iter().enumerate().map(|(j, &id)| (id, j)).collect();
    let mut values = Array2::zeros((range.n_days(), ids.len()));
    for (post, &label) in posts.iter().zip(labels) {
        if label == NOISE {
            continue;
        }
        if let Some(row) = range.offset(post.day) {
            values[[row, col[&label]]] += 1.0;
        }
    }
    FeatureTable::new(region, range.start, ids.iter().map(|&id| cluster_feature_name(id)).collect(), values)
}

fn trailing_mean(values: impl Iterator<Item = f64>, w: usize) -> Vec<f64> {
    let values: Vec<f64> = values.collect();
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (t, v) in values.iter().enumerate() {
        sum += v;
        if t >= w {
            sum -= values[t - w];
        }
        let len = (t + 1).min(w);
        out.push(sum / len as f64);
    }
    out
}

/// Trailing `w`-day mean; the first `w - 1` days average the available
/// prefix.
pub fn moving_average(s: &DailySeries, w: usize) -> Result<DailySeries> {
    if w == 0 {
        return Err(Error::invalid("moving-average window must be at least 1"));
    }
    let values = trailing_mean(s.values.iter().copied(), w);
    Ok(s.with_values(format!("{}_ma{w}", s.name), s.start, values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Chi2,
    FRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFeature {
    pub name: String,
    pub score: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    /// Ascending p-value, descending score on ties.
    pub kept: Vec<ScoredFeature>,
}

impl SelectionResult {
    pub fn names(&self) -> Vec<String> {
        self.kept.iter().map(|f| f.name.clone()).collect()
    }
}

fn rank_and_keep(method: SelectionMethod, mut scored: Vec<ScoredFeature>, top: usize) -> SelectionResult {
    scored.sort_by(|a, b| a.p_value.total_cmp(&b.p_value).then(b.score.total_cmp(&a.score)));
    scored.truncate(top);
    SelectionResult { method, kept: scored }
}

/// Upper tail of the chi-squared distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(df / 2.0, x / 2.0)
}

/// Upper tail of F(1, df2), via the regularised incomplete beta function.
pub fn f1_sf(f: f64, df2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    beta_reg(df2 / 2.0, 0.5, df2 / (df2 + f))
}

/// Per-feature chi-squared statistic of class-wise column sums against
/// their expectation under the class priors. Scores per feature are
/// computed over the table's rows; `labels[i]` is row `i`'s class.
pub fn chi2_scores(x: &FeatureTable, labels: &[u8]) -> Result<Vec<ScoredFeature>> {
    if labels.len() != x.n_days() {
        return Err(Error::dim(x.n_days(), labels.len()));
    }
    if x.values.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("chi-squared selection needs non-negative features"));
    }
    let classes: Vec<u8> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let n = labels.len() as f64;
    let priors: Vec<f64> = classes
        .iter()
        .map(|&c| labels.iter().filter(|&&l| l == c).count() as f64 / n)
        .collect();
    let df = (classes.len().max(2) - 1) as f64;
    Ok(x.names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col = x.values.column(j);
            let total: f64 = col.sum();
            let mut score = 0.0;
            if total > 0.0 {
                for (ci, &c) in classes.iter().enumerate() {
                    let observed: f64 = col.iter().zip(labels).filter(|(_, &l)| l == c).map(|(v, _)| v).sum();
                    let expected = total * priors[ci];
                    score += (observed - expected).powi(2) / expected;
                }
            }
            ScoredFeature {
                name: name.clone(),
                score,
                p_value: chi2_sf(score, df),
            }
        })
        .collect())
}

pub fn chi2_select(x: &FeatureTable, labels: &[u8], top: usize) -> Result<SelectionResult> {
    Ok(rank_and_keep(SelectionMethod::Chi2, chi2_scores(x, labels)?, top))
}

/// Pearson correlation of each column with `y`, its F statistic on
/// (1, n-2) degrees of freedom and the upper-tail p-value. Constant columns
/// score `F = 0`, `p = 1`.
pub fn f_regression_scores(x: &FeatureTable, y: &[f64]) -> Result<Vec<(ScoredFeature, f64)>> {
    let n = y.len();
    if n != x.n_days() {
        return Err(Error::dim(x.n_days(), n));
    }
    if n < 3 {
        return Err(Error::invalid("f-regression needs at least 3 rows"));
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let y_norm = yc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if y_norm == 0.0 {
        return Err(Error::invalid("f-regression target is constant"));
    }
    let dof = (n - 2) as f64;
    Ok(x.names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col = x.values.column(j);
            let mean = col.sum() / n as f64;
            let (mut dot, mut ss) = (0.0, 0.0);
            for (v, yv) in col.iter().zip(&yc) {
                let c = v - mean;
                dot += c * yv;
                ss += c * c;
            }
            let rho = if ss > 0.0 { (dot / (ss.sqrt() * y_norm)).clamp(-1.0, 1.0) } else { 0.0 };
            let r2 = rho * rho;
            let f = if r2 >= 1.0 { f64::INFINITY } else { r2 / (1.0 - r2) * dof };
            (
                ScoredFeature {
                    name: name.clone(),
                    score: f,
                    p_value: f1_sf(f, dof),
                },
                rho,
            )
        })
        .collect())
}

pub fn f_regression_select(x: &FeatureTable, y: &[f64], top: usize) -> Result<SelectionResult> {
    let scored = f_regression_scores(x, y)?.into_iter().map(|(s, _)| s).collect();
    Ok(rank_and_keep(SelectionMethod::FRegression, scored, top))
}

/// Daily occurrence count of each lexicon word over all posts' tokens.
pub fn keyword_counts(posts: &[PostRecord], lexicon: &[String], range: &DateRange, region: &str) -> Result<FeatureTable> {
    if lexicon.is_empty() {
        return Err(Error::invalid("keyword lexicon is empty"));
    }
    let col: HashMap<&str, usize> = lexicon.iter().enumerate().map(|(j, w)| (w.as_str(), j)).collect();
    let mut values = Array2::zeros((range.n_days(), lexicon.len()));
    for post in posts {
        let Some(row) = range.offset(post.day) else { continue };
        for tok in &post.tokens {
            if let Some(&j) = col.get(tok.as_str()) {
                values[[row, j]] += 1.0;
            }
        }
    }
    FeatureTable::new(region, range.start, lexicon.iter().map(|w| format!("kw_{w}")).collect(), values)
}

pub fn word_counts<'a>(posts: impl IntoIterator<Item = &'a PostRecord>) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for post in posts {
        for tok in &post.tokens {
            *counts.entry(tok.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Chi-squared statistic of a 2×2 table `[[a, b], [c, d]]`.
pub fn chi2_2x2(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let n = a + b + c + d;
    let denom = (a + b) * (c + d) * (a + c) * (b + d);
    if denom == 0.0 {
        return 0.0;
    }
    n * (a * d - b * c).powi(2) / denom
}

/// Words over-represented in the target posts relative to a background
/// corpus, ranked by the 2×2 chi-squared statistic (word vs. other words,
/// target vs. background).
pub fn overrepresented_words(
    target: &[PostRecord],
    background: &BTreeMap<String, u64>,
    top: usize,
) -> Result<Vec<(String, f64)>> {
    let target_counts = word_counts(target);
    let target_total: u64 = target_counts.values().sum();
    if target_total == 0 {
        return Err(Error::invalid("target corpus is empty"));
    }
    let background_total: u64 = background.values().sum();
    let mut scored: Vec<(String, f64)> = target_counts
        .iter()
        .filter_map(|(word, &a)| {
            let c = background.get(word).copied().unwrap_or(0);
            let (a, b) = (a as f64, (target_total - a) as f64);
            let (c, d) = (c as f64, background_total.saturating_sub(c) as f64);
            let over = a / (a + b) > c / (c + d).max(f64::MIN_POSITIVE);
            over.then(|| (word.clone(), chi2_2x2(a, b, c, d)))
        })
        .collect();
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    scored.truncate(top);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn post(id: &str, day: &str, tokens: &[&str]) -> PostRecord {
        PostRecord {
            id: id.into(),
            day: d(day),
            region: "WA".into(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
        }
    }

    #[test]
    fn three_posts_same_cluster_same_day() {
        let posts = vec![post("a", "2020-03-01", &["x"]), post("b", "2020-03-01", &["y"]), post("c", "2020-03-01", &["z"])];
        let range = DateRange::new(d("2020-03-01"), d("2020-03-02")).unwrap();
        let t = daily_cluster_counts(&posts, &[4, 4, 4], &range, "WA").unwrap();
        assert_eq!(t.names, vec!["c4"]);
        assert_eq!(t.values, array![[3.0], [0.0]]);
    }

    #[test]
    fn all_noise_gives_no_columns() {
        let posts = vec![post("a", "2020-03-01", &["x"])];
        let range = DateRange::new(d("2020-03-01"), d("2020-03-03")).unwrap();
        let t = daily_cluster_counts(&posts, &[NOISE], &range, "WA").unwrap();
        assert_eq!(t.n_features(), 0);
        assert_eq!(t.n_days(), 3);
    }

    #[test]
    fn moving_average_prefix_mean() {
        let s = DailySeries::new("WA", "c", d("2020-03-01"), vec![0.0, 7.0]);
        let m = moving_average(&s, 7).unwrap();
        assert_eq!(m.values, vec![0.0, 3.5]);
        let c = DailySeries::new("WA", "c", d("2020-03-01"), vec![2.5; 12]);
        assert!(moving_average(&c, 7).unwrap().values.iter().all(|&v| (v - 2.5).abs() < 1e-15));
        assert!(moving_average(&c, 0).is_err());
    }

    fn table(cols: &[(&str, Vec<f64>)]) -> FeatureTable {
        let n = cols[0].1.len();
        let values = Array2::from_shape_fn((n, cols.len()), |(i, j)| cols[j].1[i]);
        FeatureTable::new("WA", d("2020-03-01"), cols.iter().map(|c| c.0.to_string()).collect(), values).unwrap()
    }

    #[test]
    fn chi2_identical_across_classes_scores_zero() {
        let t = table(&[("f", vec![2.0, 2.0, 2.0, 2.0])]);
        let s = chi2_scores(&t, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s[0].score, 0.0);
        assert_eq!(s[0].p_value, 1.0);
    }

    #[test]
    fn chi2_single_class_feature_scores_ten() {
        // class sums 10 vs 0 with equal priors: (10-5)^2/5 + (0-5)^2/5
        let t = table(&[("f", vec![0.0, 0.0, 4.0, 6.0])]);
        let s = chi2_scores(&t, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s[0].score, 10.0);
    }

    #[test]
    fn chi2_rejects_negative_values() {
        let t = table(&[("f", vec![0.0, -1.0])]);
        assert!(chi2_scores(&t, &[0, 1]).is_err());
    }

    #[test]
    fn f_regression_identity_and_orthogonal() {
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let t = table(&[("same", y.clone()), ("orth", vec![1.0, -1.0, 0.0, -1.0, 1.0]), ("flat", vec![3.0; 5])]);
        let s = f_regression_scores(&t, &y).unwrap();
        assert!((s[0].1 - 1.0).abs() < 1e-12);
        assert!(s[0].0.p_value < 1e-12);
        assert!(s[1].1.abs() < 1e-15);
        assert_eq!(s[1].0.score, 0.0);
        assert_eq!(s[1].0.p_value, 1.0);
        assert_eq!(s[2].0.p_value, 1.0);
        let sel = f_regression_select(&t, &y, 2).unwrap();
        assert_eq!(sel.names()[0], "same");
        assert_eq!(sel.kept.len(), 2);
    }

    #[test]
    fn keyword_counts_repeat_tokens() {
        let posts = vec![post("a", "2020-03-01", &["fever", "fever"])];
        let range = DateRange::new(d("2020-03-01"), d("2020-03-01")).unwrap();
        let lex = vec!["fever".to_string(), "cough".to_string()];
        let t = keyword_counts(&posts, &lex, &range, "WA").unwrap();
        assert_eq!(t.values, array![[2.0, 0.0]]);
        assert!(keyword_counts(&posts, &[], &range, "WA").is_err());
    }

    #[test]
    fn overrepresented_identical_frequency_scores_zero() {
        let target = vec![post("a", "2020-03-01", &["alpha", "beta"])];
        let background: BTreeMap<String, u64> = [("alpha".to_string(), 5), ("beta".to_string(), 5)].into();
        // neither word is strictly over-represented
        assert!(overrepresented_words(&target, &background, 10).unwrap().is_empty());
        assert!(chi2_2x2(1.0, 1.0, 5.0, 5.0).abs() < 1e-9);
        assert!(overrepresented_words(&[], &background, 3).is_err());
    }
}
