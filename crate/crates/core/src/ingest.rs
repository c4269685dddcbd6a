//! Parsing and alignment of the external inputs: the posts corpus, the
//! sentence-embedding matrix and the daily covariate series.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive range of UTC calendar days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::invalid(format!("date range {start}..{end} is reversed")));
        }
        Ok(Self { start, end })
    }

    pub fn n_days(&self) -> usize {
        (self.end - self.start).num_days() as usize + 1
    }

    pub fn contains(&self, day: NaiveDate) -> bool {
        day >= self.start && day <= self.end
    }

    /// Zero-based offset of `day` from the start of the range.
    pub fn offset(&self, day: NaiveDate) -> Option<usize> {
        self.contains(day).then(|| (day - self.start).num_days() as usize)
    }

    pub fn day(&self, offset: usize) -> NaiveDate {
        self.start + Duration::days(offset as i64)
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        (0..self.n_days()).map(|i| self.day(i))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostRecord {
    pub id: String,
    pub day: NaiveDate,
    pub region: String,
    pub tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PostLine {
    id: String,
    utc: i64,
    region: String,
    tokens: Vec<String>,
}

fn day_of_timestamp(utc: i64) -> Option<NaiveDate> {
    DateTime::from_timestamp(utc, 0).map(|t| t.date_naive())
}

fn midnight_timestamp(day: NaiveDate) -> i64 {
    day.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp()
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses a JSON-lines posts file. Records come back sorted by day (stable
/// with respect to file order).
pub fn parse_posts(path: &Path) -> Result<Vec<PostRecord>> {
    let reader = BufReader::new(File::open(path)?);
    parse_posts_from(reader, path)
}

pub fn parse_posts_from(reader: impl BufRead, origin: &Path) -> Result<Vec<PostRecord>> {
    let mut seen = HashSet::new();
    let mut posts = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: PostLine =
            serde_json::from_str(&line).map_err(|e| parse_error(origin, lineno, e.to_string()))?;
        let day = day_of_timestamp(raw.utc)
            .ok_or_else(|| parse_error(origin, lineno, format!("timestamp {} out of range", raw.utc)))?;
        if raw.tokens.is_empty() {
            return Err(Error::Validation(format!("post `{}` (line {lineno}) has no tokens", raw.id)));
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::Validation(format!("duplicate post id `{}` at line {lineno}", raw.id)));
        }
        posts.push(PostRecord {
            id: raw.id,
            day,
            region: raw.region,
            tokens: raw.tokens,
        });
    }
    posts.sort_by_key(|p| p.day);
    Ok(posts)
}

/// Drops posts outside `range`; used to enforce the study window.
pub fn restrict_posts(posts: Vec<PostRecord>, range: &DateRange) -> Vec<PostRecord> {
    posts.into_iter().filter(|p| range.contains(p.day)).collect()
}

pub fn write_posts(path: &Path, posts: &[PostRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for post in posts {
        let line = PostLine {
            id: post.id.clone(),
            utc: midnight_timestamp(post.day),
            region: post.region.clone(),
            tokens: post.tokens.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Row-aligned sentence vectors keyed by post id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub vectors: Array2<f32>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    id: String,
    v: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.vectors.mapv(f64::from)
    }

    /// Checks that every row id names a post in `posts`.
    pub fn check_against(&self, posts: &[PostRecord]) -> Result<()> {
        let known: HashSet<&str> = posts.iter().map(|p| p.id.as_str()).collect();
        if let Some(missing) = self.ids.iter().find(|id| !known.contains(id.as_str())) {
            return Err(Error::Validation(format!("embedding id `{missing}` has no post")));
        }
        Ok(())
    }

    /// Reorders rows to follow `posts`, failing if any post lacks a vector.
    pub fn aligned_to(&self, posts: &[PostRecord]) -> Result<EmbeddingMatrix> {
        let index: HashMap<&str, usize> =
            self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut vectors = Array2::zeros((posts.len(), self.dim()));
        for (row, post) in posts.iter().enumerate() {
            let src = *index
                .get(post.id.as_str())
                .ok_or_else(|| Error::Validation(format!("post `{}` has no embedding", post.id)))?;
            vectors.row_mut(row).assign(&self.vectors.row(src));
        }
        Ok(EmbeddingMatrix {
            ids: posts.iter().map(|p| p.id.clone()).collect(),
            vectors,
        })
    }
}

pub fn parse_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let reader = BufReader::new(File::open(path)?);
    parse_embeddings_from(reader, path)
}

pub fn parse_embeddings_from(reader: impl BufRead, origin: &Path) -> Result<EmbeddingMatrix> {
    let mut ids = Vec::new();
    let mut flat: Vec<f32> = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // serde_json maps NaN/Inf to null, which already fails to parse as f32.
        let raw: EmbeddingLine =
            serde_json::from_str(&line).map_err(|e| parse_error(origin, lineno, e.to_string()))?;
        match dim {
            None if raw.v.is_empty() => {
                return Err(parse_error(origin, lineno, "empty vector"));
            }
            None => dim = Some(raw.v.len()),
            Some(d) if d != raw.v.len() => {
                return Err(Error::Dimension {
                    expected: d,
                    found: raw.v.len(),
                    context: Some(format!("{} line {lineno}", origin.display())),
                });
            }
            Some(_) => {}
        }
        if raw.v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("non-finite value in vector `{}` (line {lineno})", raw.id)));
        }
        ids.push(raw.id);
        flat.extend_from_slice(&raw.v);
    }
    let d = dim.unwrap_or(0);
    let vectors = Array2::from_shape_vec((ids.len(), d), flat).expect("row lengths checked");
    Ok(EmbeddingMatrix { ids, vectors })
}

pub fn write_embeddings(path: &Path, emb: &EmbeddingMatrix) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (id, row) in emb.ids.iter().zip(emb.vectors.rows()) {
        let line = EmbeddingLine {
            id: id.clone(),
            v: row.to_vec(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// One value per consecutive day starting at `start`. Missing days hold NaN
/// until the series is aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub region: String,
    pub name: String,
    pub start: NaiveDate,
    pub values: Vec<f64>,
}

impl DailySeries {
    pub fn new(region: impl Into<String>, name: impl Into<String>, start: NaiveDate, values: Vec<f64>) -> Self {
        Self {
            region: region.into(),
            name: name.into(),
            start,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end(&self) -> NaiveDate {
        self.start + Duration::days(self.values.len() as i64 - 1)
    }

    pub fn span(&self) -> Option<DateRange> {
        (!self.is_empty()).then(|| DateRange {
            start: self.start,
            end: self.end(),
        })
    }

    pub fn has_gaps(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    pub fn get(&self, day: NaiveDate) -> Option<f64> {
        let off = (day - self.start).num_days();
        if off < 0 {
            return None;
        }
        self.values.get(off as usize).copied().filter(|v| !v.is_nan())
    }

    pub fn with_values(&self, name: impl Into<String>, start: NaiveDate, values: Vec<f64>) -> DailySeries {
        DailySeries {
            region: self.region.clone(),
            name: name.into(),
            start,
            values,
        }
    }

    /// Clips to `range`, forward-filling interior gaps and back-filling the
    /// leading days with the first observation inside the range.
    pub fn aligned(&self, range: &DateRange) -> Result<DailySeries> {
        let observed: Vec<Option<f64>> = range.days().map(|d| self.get(d)).collect();
        let first = observed
            .iter()
            .flatten()
            .next()
            .copied()
            .ok_or_else(|| Error::Coverage(self.name.clone()))?;
        let mut last = first;
        let values = observed
            .into_iter()
            .map(|v| {
                if let Some(v) = v {
                    last = v;
                }
                last
            })
            .collect();
        Ok(self.with_values(self.name.clone(), range.start, values))
    }
}

/// Column mapping for [`load_series_csv`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesSchema {
    pub date_column: String,
    pub value_column: String,
    /// When set, only rows whose value in this column equals the requested
    /// region are kept (for multi-region files).
    #[serde(default)]
    pub region_column: Option<String>,
    /// Series name; defaults to the value column.
    #[serde(default)]
    pub name: Option<String>,
}

impl SeriesSchema {
    pub fn new(date_column: &str, value_column: &str) -> Self {
        Self {
            date_column: date_column.to_string(),
            value_column: value_column.to_string(),
            region_column: None,
            name: None,
        }
    }
}

pub fn load_series_csv(path: &Path, schema: &SeriesSchema, region: &str) -> Result<DailySeries> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_error(path, 1, format!("missing column `{name}`")))
    };
    let date_col = column(&schema.date_column)?;
    let value_col = column(&schema.value_column)?;
    let region_col = schema.region_column.as_deref().map(column).transpose()?;

    let mut points: BTreeMap<NaiveDate, f64> = BTreeMap::new();
    for (idx, record) in rdr.records().enumerate() {
        // header is line 1
        let lineno = idx + 2;
        let record = record?;
        if let Some(rc) = region_col {
            if record.get(rc) != Some(region) {
                continue;
            }
        }
        let raw_date = record.get(date_col).unwrap_or("");
        let day = NaiveDate::parse_from_str(raw_date.trim(), "%Y-%m-%d")
            .map_err(|e| parse_error(path, lineno, format!("bad date `{raw_date}`: {e}")))?;
        let raw_value = record.get(value_col).unwrap_or("").trim();
        if raw_value.is_empty() {
            continue;
        }
        let value: f64 = raw_value
            .parse()
            .map_err(|e| parse_error(path, lineno, format!("bad value `{raw_value}`: {e}")))?;
        if !value.is_finite() {
            return Err(parse_error(path, lineno, "non-finite value"));
        }
        points.insert(day, value);
    }

    let (Some((&first, _)), Some((&last, _))) = (points.first_key_value(), points.last_key_value()) else {
        return Err(parse_error(path, 1, "no data rows"));
    };
    let span = DateRange { start: first, end: last };
    let values = span
        .days()
        .map(|d| points.get(&d).copied().unwrap_or(f64::NAN))
        .collect();
    let name = schema.name.clone().unwrap_or_else(|| schema.value_column.clone());
    Ok(DailySeries::new(region, name, first, values))
}

pub fn write_series_csv(path: &Path, series: &DailySeries) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["date", series.name.as_str()])?;
    for (i, v) in series.values.iter().enumerate() {
        let day = series.start + Duration::days(i as i64);
        let value = if v.is_nan() { String::new() } else { v.to_string() };
        wtr.write_record([day.format("%Y-%m-%d").to_string(), value])?;
    }
    wtr.flush()?;
    Ok(())
}

/// The daily inputs for one region: caseload, mobility (M), government
/// response (G) and post volume (P).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBundle {
    pub region: String,
    pub caseload: DailySeries,
    pub mobility: Vec<DailySeries>,
    pub gov_response: Vec<DailySeries>,
    pub post_count: DailySeries,
}

impl CovariateBundle {
    pub fn iter(&self) -> impl Iterator<Item = &DailySeries> {
        std::iter::once(&self.caseload)
            .chain(&self.mobility)
            .chain(&self.gov_response)
            .chain(std::iter::once(&self.post_count))
    }

    pub fn range(&self) -> Option<DateRange> {
        self.caseload.span()
    }
}

/// Clips every member to `range` and fills gaps; see [`DailySeries::aligned`].
pub fn align_bundle(bundle: &CovariateBundle, range: &DateRange) -> Result<CovariateBundle> {
    if let Some(other) = bundle.iter().find(|s| s.region != bundle.region) {
        return Err(Error::Validation(format!(
            "series `{}` belongs to region `{}`, bundle is `{}`",
            other.name, other.region, bundle.region
        )));
    }
    let align_all = |set: &[DailySeries]| set.iter().map(|s| s.aligned(range)).collect::<Result<Vec<_>>>();
    Ok(CovariateBundle {
        region: bundle.region.clone(),
        caseload: bundle.caseload.aligned(range)?,
        mobility: align_all(&bundle.mobility)?,
        gov_response: align_all(&bundle.gov_response)?,
        post_count: bundle.post_count.aligned(range)?,
    })
}

/// Number of posts per day over `range`; days without posts count zero.
pub fn daily_post_counts(posts: &[PostRecord], region: &str, range: &DateRange) -> DailySeries {
    let mut values = vec![0.0; range.n_days()];
    for post in posts {
        if let Some(off) = range.offset(post.day) {
            values[off] += 1.0;
        }
    }
    DailySeries::new(region, "post_count", range.start, values)
}
