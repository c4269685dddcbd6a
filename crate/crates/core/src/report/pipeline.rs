//! End-to-end orchestration: ingest, reduce, cluster, features, threshold
//! evaluation, forecasting, significance and table emission.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cache::{file_digest, CacheEvent, KeyBuilder, StageCache};
use super::config::{PipelineConfig, Reduction, RegionInputs};
use super::labels::{label_clusters, stopwords, ClusterLabel};
use crate::cluster::{fit_hdbscan, gmm_fit, silhouette, spherical_kmeans, Algorithm, ClusterModel, ClusterSummary};
use crate::dimred::{fit_pca, fit_umap, transform, UmapParams};
use crate::error::{Error, Result};
use crate::features::{
    daily_cluster_counts, keyword_counts, moving_average, overrepresented_words, word_counts, FeatureTable,
};
use crate::forecast::{ablation_run, difference, AblationData, CovariateSet, ForecastRun, ModelKind};
use crate::ingest::{
    daily_post_counts, load_series_csv, parse_embeddings, parse_posts, DailySeries, DateRange, EmbeddingMatrix,
    PostRecord,
};
use crate::stats::{build_error_distribution, z_test, ErrorDistribution, SignificanceReport};
use crate::threshold::{evaluate_threshold, label_days, ThresholdEval, ThresholdSpec};

pub const TEXT: &str = "T_RoB";
pub const BOW: &str = "T_BoW";
pub const KEYWORDS: &str = "T_KW";
pub const MOBILITY: &str = "M";
pub const GOVERNMENT: &str = "G";
pub const POSTS: &str = "P";
pub const CASES: &str = "C";

/// Threshold-task feature sets: each group alone, then text plus every
/// comparison group.
pub fn threshold_sets() -> Vec<(String, Vec<&'static str>)> {
    let mut sets: Vec<(String, Vec<&str>)> = [TEXT, BOW, KEYWORDS, MOBILITY, GOVERNMENT, POSTS, CASES]
        .iter()
        .map(|g| (g.to_string(), vec![*g]))
        .collect();
    for text in [TEXT, BOW] {
        sets.push((format!("{text}++"), vec![text, MOBILITY, GOVERNMENT, POSTS, CASES]));
    }
    sets
}

/// Loaded and aligned inputs of one region.
#[derive(Debug, Clone)]
pub struct RegionData {
    pub tag: String,
    pub range: DateRange,
    pub posts: Vec<PostRecord>,
    pub embeddings: EmbeddingMatrix,
    pub caseload: DailySeries,
    pub mobility: Vec<DailySeries>,
    pub government: Vec<DailySeries>,
    /// Digest of every input file, used in cache keys.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub algorithm: Algorithm,
    pub k: Option<usize>,
    pub labels: Vec<i32>,
    pub clusters: Vec<ClusterSummary>,
}

impl Clustering {
    fn from_model(m: ClusterModel, k: Option<usize>) -> Self {
        Self {
            algorithm: m.algorithm,
            k,
            labels: m.labels,
            clusters: m.clusters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub region: String,
    pub feature_set: String,
    pub tau: usize,
    pub m: f64,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Normalised Gini importance summed by feature group.
    pub importance: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub region: String,
    pub reduction: Reduction,
    pub algorithm: Algorithm,
    pub k: Option<usize>,
    pub tau: usize,
    /// Mean accuracy over the grid's margins.
    pub accuracy: f64,
    pub n_clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteRow {
    pub region: String,
    pub reduction: Reduction,
    pub algorithm: Algorithm,
    pub k: usize,
    pub silhouette: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub silhouette: Vec<SilhouetteRow>,
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub config_hash: String,
    pub outputs: Vec<PathBuf>,
    pub cache: Vec<CacheEvent>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub cache: StageCache,
    hash: String,
}

fn stage<T>(name: &str, region: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => e.in_stage(&format!("{name} [{region}]")),
    })
}

fn prefixed(table: FeatureTable, group: &str) -> FeatureTable {
    FeatureTable {
        names: table.names.iter().map(|n| format!("{group}:{n}")).collect(),
        ..table
    }
}

fn group_of(name: &str) -> &str {
    name.split_once(':').map_or(name, |(g, _)| g)
}

fn table_group(group: &str) -> &str {
    if group.starts_with('T') {
        "T"
    } else {
        group
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Writes `bytes` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

struct Csv(csv::Writer<Vec<u8>>);

impl Csv {
    fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(header: I) -> Result<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header.into_iter().map(|s| s.as_ref().to_string()))?;
        Ok(Self(w))
    }

    fn row(&mut self, fields: Vec<String>) -> Result<()> {
        self.0.write_record(fields)?;
        Ok(())
    }

    fn save(self, path: &Path, outputs: &mut Vec<PathBuf>) -> Result<()> {
        let bytes = self.0.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(path, &bytes)?;
        outputs.push(path.to_path_buf());
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        let cache = StageCache::new(config.cache_dir());
        let hash = config.hash();
        Self { config, cache, hash }
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn provenance(&self) -> [String; 2] {
        [self.hash.clone(), self.config.seed.to_string()]
    }

    // ---- ingest ----

    pub fn ingest(&self, inputs: &RegionInputs) -> Result<RegionData> {
        stage("ingest", &inputs.tag, self.ingest_inner(inputs))
    }

    fn ingest_inner(&self, inputs: &RegionInputs) -> Result<RegionData> {
        let range = self.config.dates.span();
        let mut key = KeyBuilder::new("inputs");
        key.json(&inputs.caseload.schema);
        for p in [&inputs.posts, &inputs.embeddings, &inputs.caseload.path] {
            key.bytes(file_digest(p)?.as_bytes());
        }
        for s in inputs.mobility.iter().chain(&inputs.government) {
            key.json(&s.schema).bytes(file_digest(&s.path)?.as_bytes());
        }
        let posts: Vec<PostRecord> = parse_posts(&inputs.posts)?
            .into_iter()
            .filter(|p| p.region == inputs.tag && range.contains(p.day))
            .collect();
        if posts.is_empty() {
            return Err(Error::Validation(format!(
                "no posts for region {} between {} and {}",
                inputs.tag, range.start, range.end
            )));
        }
        let embeddings = parse_embeddings(&inputs.embeddings)?.aligned_to(&posts)?;
        let load = |s: &super::config::SeriesInput| load_series_csv(&s.path, &s.schema, &inputs.tag)?.aligned(&range);
        Ok(RegionData {
            tag: inputs.tag.clone(),
            range,
            caseload: load(&inputs.caseload)?,
            mobility: inputs.mobility.iter().map(load).collect::<Result<_>>()?,
            government: inputs.government.iter().map(load).collect::<Result<_>>()?,
            posts,
            embeddings,
            digest: key.finish(),
        })
    }

    // ---- reduce ----

    fn umap_params(&self, out_dim: usize) -> UmapParams {
        let r = &self.config.reduce;
        UmapParams {
            n_neighbors: r.n_neighbors,
            min_dist: r.min_dist,
            n_epochs: r.n_epochs,
            out_dim,
            seed: self.config.seed,
        }
    }

    fn reduce_key(&self, data: &RegionData, method: Reduction, out_dim: usize) -> String {
        let mut k = KeyBuilder::new("reduce");
        k.bytes(data.digest.as_bytes()).json(&method).json(&self.config.dates.span());
        match method {
            Reduction::Umap => k.json(&self.umap_params(out_dim)),
            Reduction::Pca => k.json(&out_dim),
        };
        k.finish()
    }

    /// Reduced embedding coordinates, one row per post.
    pub fn reduce(&self, data: &RegionData, method: Reduction) -> Result<Array2<f64>> {
        self.reduce_to(data, method, self.config.reduce.out_dim)
    }

    fn reduce_to(&self, data: &RegionData, method: Reduction, out_dim: usize) -> Result<Array2<f64>> {
        let key = self.reduce_key(data, method, out_dim);
        let name = format!("reduce-{}{out_dim}", method.as_str());
        let r = self.cache.get_or_compute(&name, &key, || {
            let x = data.embeddings.to_f64();
            let proj = match method {
                Reduction::Umap => fit_umap(x.view(), &self.umap_params(out_dim))?,
                Reduction::Pca => fit_pca(x.view(), out_dim.min(x.ncols()))?,
            };
            match proj.training_embedding() {
                Some(y) => Ok(y.clone()),
                None => transform(&proj, x.view()),
            }
        });
        stage("reduce", &data.tag, r)
    }

    // ---- cluster ----

    fn cluster_key(&self, data: &RegionData, method: Reduction, algorithm: Algorithm, k: Option<usize>) -> String {
        let mut key = KeyBuilder::new("cluster");
        key.bytes(self.reduce_key(data, method, self.config.reduce.out_dim).as_bytes())
            .json(&algorithm)
            .json(&k)
            .json(&self.config.seed);
        if algorithm == Algorithm::Hdbscan {
            key.json(&self.config.cluster);
        }
        key.finish()
    }

    pub fn cluster_with(
        &self,
        data: &RegionData,
        method: Reduction,
        algorithm: Algorithm,
        k: Option<usize>,
    ) -> Result<Clustering> {
        let key = self.cluster_key(data, method, algorithm, k);
        let name = format!("cluster-{}-{}", method.as_str(), algorithm.as_str());
        let r = self.cache.get_or_compute(&name, &key, || {
            let y = self.reduce(data, method)?;
            let seed = self.config.seed;
            let model = match (algorithm, k) {
                (Algorithm::Hdbscan, _) => fit_hdbscan(y.view(), &self.config.cluster)?,
                (Algorithm::Km, Some(k)) => spherical_kmeans(y.view(), k, seed)?,
                (Algorithm::Gmm, Some(k)) => gmm_fit(y.view(), k, seed)?,
                (_, None) => return Err(Error::invalid(format!("{} needs k", algorithm.as_str()))),
            };
            Ok(Clustering::from_model(model, k))
        });
        stage("cluster", &data.tag, r)
    }

    /// HDBSCAN on the configured reduction.
    pub fn cluster(&self, data: &RegionData) -> Result<Clustering> {
        self.cluster_with(data, self.config.reduce.method, Algorithm::Hdbscan, None)
    }

    // ---- features ----

    /// Rising days (positive change over `bow_tau`) inside the training
    /// period define the target corpus of the bag-of-words lexicon.
    fn bow_lexicon(&self, data: &RegionData, mu: &DailySeries) -> Result<Vec<String>> {
        let fc = &self.config.features;
        let tau = fc.bow_tau;
        let train_end = self.config.dates.train_end.min(self.config.dates.threshold_end);
        let rising: std::collections::HashSet<chrono::NaiveDate> = (0..mu.len().saturating_sub(tau))
            .filter(|&t| {
                let day = mu.start + chrono::Duration::days((t + tau) as i64);
                day <= train_end && mu.values[t] > 0.0 && mu.values[t + tau] > mu.values[t]
            })
            .map(|t| mu.start + chrono::Duration::days(t as i64))
            .collect();
        let (target, rest): (Vec<&PostRecord>, Vec<&PostRecord>) = data
            .posts
            .iter()
            .filter(|p| p.day <= train_end)
            .partition(|p| rising.contains(&p.day));
        let target: Vec<PostRecord> = target.into_iter().cloned().collect();
        if target.is_empty() {
            return Err(Error::Validation("no posts on rising days for the bag-of-words lexicon".into()));
        }
        let stop = stopwords();
        let background = word_counts(rest);
        Ok(overrepresented_words(&target, &background, fc.bow_words + stop.len())?
            .into_iter()
            .map(|(w, _)| w)
            .filter(|w| !stop.contains(w))
            .take(fc.bow_words)
            .collect())
    }

    /// Feature groups over the full date span, each smoothed with the
    /// trailing moving average and with names prefixed by the group tag.
    pub fn features(&self, data: &RegionData, clustering: &Clustering) -> Result<BTreeMap<String, FeatureTable>> {
        stage("features", &data.tag, self.features_inner(data, clustering))
    }

    fn features_inner(&self, data: &RegionData, clustering: &Clustering) -> Result<BTreeMap<String, FeatureTable>> {
        let w = self.config.features.moving_average;
        let range = data.range;
        let tag = data.tag.as_str();
        let mu = moving_average(&data.caseload, w)?;
        let mut groups = BTreeMap::new();
        let mut put = |g: &str, t: FeatureTable| {
            groups.insert(g.to_string(), prefixed(t.moving_average(w), g));
        };
        put(TEXT, daily_cluster_counts(&data.posts, &clustering.labels, &range, tag)?);
        put(BOW, keyword_counts(&data.posts, &self.bow_lexicon(data, &mu)?, &range, tag)?);
        put(KEYWORDS, keyword_counts(&data.posts, &self.config.features.keywords, &range, tag)?);
        if !data.mobility.is_empty() {
            put(MOBILITY, FeatureTable::from_series(&data.mobility.iter().collect::<Vec<_>>())?);
        }
        if !data.government.is_empty() {
            put(GOVERNMENT, FeatureTable::from_series(&data.government.iter().collect::<Vec<_>>())?);
        }
        put(POSTS, FeatureTable::from_series(&[&daily_post_counts(&data.posts, tag, &range)])?);
        // already smoothed, so bypass `put`
        groups.insert(CASES.to_string(), prefixed(FeatureTable::from_series(&[&mu])?, CASES));
        Ok(groups)
    }

    // ---- threshold ----

    fn threshold_eval(&self) -> ThresholdEval {
        let t = &self.config.threshold;
        ThresholdEval {
            top: t.top,
            forest: t.forest,
            split: t.split,
        }
    }

    /// Accuracy of every feature set at every (tau, m); cells where one
    /// class is absent are skipped with a warning.
    pub fn threshold(
        &self,
        data: &RegionData,
        groups: &BTreeMap<String, FeatureTable>,
        cluster_key: &str,
    ) -> Result<Vec<ThresholdRow>> {
        let mut key = KeyBuilder::new("threshold");
        key.bytes(data.digest.as_bytes())
            .bytes(cluster_key.as_bytes())
            .json(&self.config.threshold)
            .json(&self.config.features)
            .json(&self.config.dates)
            .json(&self.config.seed);
        let r = self.cache.get_or_compute("threshold", &key.finish(), || self.threshold_inner(data, groups));
        stage("threshold", &data.tag, r)
    }

    fn threshold_inner(&self, data: &RegionData, groups: &BTreeMap<String, FeatureTable>) -> Result<Vec<ThresholdRow>> {
        let range = self.config.dates.threshold();
        let mu = moving_average(&data.caseload, self.config.features.moving_average)?.aligned(&range)?;
        let sets: Vec<(String, FeatureTable)> = threshold_sets()
            .into_iter()
            .filter_map(|(label, members)| {
                let tables: Vec<&FeatureTable> = members.iter().filter_map(|g| groups.get(*g)).collect();
                (!tables.is_empty()).then(|| FeatureTable::concat(&tables).and_then(|t| t.slice_days(&range)).map(|t| (label, t)))
            })
            .collect::<Result<_>>()?;
        let t = &self.config.threshold;
        let mut jobs = Vec::new();
        for (label, table) in &sets {
            for &tau in &t.taus {
                for &m in &t.margins {
                    jobs.push((label, table, ThresholdSpec::new(tau, m)?));
                }
            }
        }
        let eval = self.threshold_eval();
        let seed = self.config.seed;
        let rows: Vec<Option<ThresholdRow>> = jobs
            .par_iter()
            .map(|(label, table, spec)| {
                let labels = label_days(&mu, spec);
                let pos = labels.labels.iter().filter(|l| l.label == 1).count();
                if pos == 0 || pos == labels.labels.len() {
                    log::warn!("{} {label}: tau={} m={} has a single class, skipped", data.tag, spec.tau, spec.m);
                    return Ok(None);
                }
                let out = evaluate_threshold(&mu, table, spec, &eval, seed)?;
                let mut importance = BTreeMap::new();
                for (name, imp) in out.selected.iter().zip(&out.importances) {
                    *importance.entry(table_group(group_of(name)).to_string()).or_insert(0.0) += imp;
                }
                Ok(Some(ThresholdRow {
                    region: data.tag.clone(),
                    feature_set: label.to_string(),
                    tau: spec.tau,
                    m: spec.m,
                    accuracy: out.accuracy,
                    n_train: out.n_train,
                    n_test: out.n_test,
                    importance,
                }))
            })
            .collect::<Result<_>>()?;
        Ok(rows.into_iter().flatten().collect())
    }

    // ---- forecast ----

    pub fn forecast(
        &self,
        data: &RegionData,
        groups: &BTreeMap<String, FeatureTable>,
        cluster_key: &str,
    ) -> Result<Vec<ForecastRun>> {
        let mut key = KeyBuilder::new("forecast");
        key.bytes(data.digest.as_bytes())
            .bytes(cluster_key.as_bytes())
            .json(&self.config.forecast)
            .json(&self.config.features.moving_average)
            .json(&self.config.dates)
            .json(&self.config.seed);
        let r = self.cache.get_or_compute("forecast", &key.finish(), || self.forecast_inner(data, groups));
        stage("forecast", &data.tag, r)
    }

    fn forecast_inner(&self, data: &RegionData, groups: &BTreeMap<String, FeatureTable>) -> Result<Vec<ForecastRun>> {
        let target = difference(&data.caseload)?;
        let span = target.span().ok_or_else(|| Error::invalid("empty target"))?;
        let mut covariates = BTreeMap::new();
        for g in [TEXT, MOBILITY, GOVERNMENT] {
            if let Some(t) = groups.get(g) {
                covariates.insert(g.to_string(), t.slice_days(&span)?);
            }
        }
        let sets: Vec<CovariateSet> = CovariateSet::standard(TEXT, MOBILITY, GOVERNMENT)
            .into_iter()
            .filter(|s| s.groups.iter().all(|g| covariates.contains_key(g)))
            .collect();
        let ablation = AblationData {
            region: data.tag.clone(),
            target,
            groups: covariates,
            train_end: self.config.dates.train_end,
            test: self.config.dates.test(),
        };
        Ok(ablation_run(&ablation, &sets, &self.config.forecast, self.config.seed)?.runs)
    }

    fn error_distribution(&self, run: &ForecastRun) -> Result<ErrorDistribution> {
        build_error_distribution(&run.draws, &run.actual, self.config.stats.samples, self.config.stats.kind)
    }

    /// Z-test of each run against the univariate run of the same model,
    /// horizon and region.
    pub fn significance(&self, runs: &[ForecastRun]) -> Result<Vec<Option<SignificanceReport>>> {
        let uni: HashMap<(ModelKind, usize, &str), &ForecastRun> = runs
            .iter()
            .filter(|r| r.set == "uni")
            .map(|r| ((r.model, r.horizon, r.region.as_str()), r))
            .collect();
        runs.par_iter()
            .map(|r| {
                if r.set == "uni" {
                    return Ok(None);
                }
                let Some(base) = uni.get(&(r.model, r.horizon, r.region.as_str())) else {
                    return Ok(None);
                };
                let report = z_test(
                    &self.error_distribution(base)?,
                    &self.error_distribution(r)?,
                    self.config.stats.denominator,
                );
                match report {
                    Ok(s) => Ok(Some(s)),
                    Err(Error::Numerical(msg)) => {
                        log::warn!("{} {} T={} {}: {msg}", r.model, r.set, r.horizon, r.region);
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect()
    }

    // ---- reduction × clustering grid ----

    fn grid_accuracy(&self, data: &RegionData, labels: &[i32], mu: &DailySeries) -> Result<Vec<(usize, f64)>> {
        let range = self.config.dates.threshold();
        let w = self.config.features.moving_average;
        let table = daily_cluster_counts(&data.posts, labels, &range, &data.tag)?.moving_average(w);
        let eval = self.threshold_eval();
        let g = &self.config.grid;
        g.taus
            .iter()
            .map(|&tau| {
                let accs: Vec<f64> = g
                    .margins
                    .iter()
                    .map(|&m| {
                        let spec = ThresholdSpec::new(tau, m)?;
                        let l = label_days(mu, &spec);
                        let pos = l.labels.iter().filter(|x| x.label == 1).count();
                        if pos == 0 || pos == l.labels.len() || table.n_features() == 0 {
                            return Ok(None);
                        }
                        Ok(Some(evaluate_threshold(mu, &table, &spec, &eval, self.config.seed)?.accuracy))
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .flatten()
                    .collect();
                Ok((tau, if accs.is_empty() { f64::NAN } else { mean(&accs) }))
            })
            .collect()
    }

    /// {PCA, UMAP} × {HDBSCAN, KM, GMM} through the threshold task, plus
    /// the silhouette-vs-k curve of the baselines on each reduction.
    pub fn appendix_grid(&self, data: &RegionData) -> Result<GridOutcome> {
        let range = self.config.dates.threshold();
        let mu = moving_average(&data.caseload, self.config.features.moving_average)?.aligned(&range)?;
        let mut cells: Vec<(Reduction, Algorithm, Option<usize>)> = Vec::new();
        for method in [Reduction::Pca, Reduction::Umap] {
            cells.push((method, Algorithm::Hdbscan, None));
            for algorithm in [Algorithm::Km, Algorithm::Gmm] {
                cells.extend(self.config.grid.ks.iter().map(|&k| (method, algorithm, Some(k))));
            }
        }
        // reductions first so the parallel cells below share them
        for method in [Reduction::Pca, Reduction::Umap] {
            self.reduce(data, method)?;
        }
        let results: Vec<(Vec<GridRow>, Option<SilhouetteRow>)> = cells
            .par_iter()
            .map(|&(method, algorithm, k)| {
                let c = self.cluster_with(data, method, algorithm, k)?;
                let rows = stage("grid", &data.tag, self.grid_accuracy(data, &c.labels, &mu))?
                    .into_iter()
                    .map(|(tau, accuracy)| GridRow {
                        region: data.tag.clone(),
                        reduction: method,
                        algorithm,
                        k,
                        tau,
                        accuracy,
                        n_clusters: c.clusters.len(),
                    })
                    .collect();
                let sil = match k {
                    Some(k) => {
                        let key = KeyBuilder::new("silhouette")
                            .bytes(self.cluster_key(data, method, algorithm, Some(k)).as_bytes())
                            .finish();
                        let s: f64 = self.cache.get_or_compute("silhouette", &key, || {
                            let y = self.reduce(data, method)?;
                            silhouette(y.view(), &c.labels)
                        })?;
                        Some(SilhouetteRow {
                            region: data.tag.clone(),
                            reduction: method,
                            algorithm,
                            k,
                            silhouette: s,
                        })
                    }
                    None => None,
                };
                Ok((rows, sil))
            })
            .collect::<Result<_>>()?;
        let mut out = GridOutcome {
            rows: Vec::new(),
            silhouette: Vec::new(),
        };
        for (rows, sil) in results {
            out.rows.extend(rows);
            out.silhouette.extend(sil);
        }
        Ok(out)
    }

    // ---- emission ----

    pub fn write_clusters(&self, data: &RegionData, c: &Clustering, outputs: &mut Vec<PathBuf>) -> Result<Vec<ClusterLabel>> {
        let labels = label_clusters(&c.labels, &data.posts, stopwords())?;
        let stability: HashMap<i32, f64> = c.clusters.iter().map(|s| (s.id, s.stability)).collect();
        let mut csv = Csv::new(["region", "cluster", "frequency", "stability", "top_words", "config_hash", "seed"])?;
        for l in &labels {
            let [h, s] = self.provenance();
            csv.row(vec![
                data.tag.clone(),
                l.id.to_string(),
                l.frequency.to_string(),
                stability.get(&l.id).copied().unwrap_or(0.0).to_string(),
                l.top_words.join(" "),
                h,
                s,
            ])?;
        }
        csv.save(&self.out(&format!("clusters_{}.csv", data.tag)), outputs)?;
        let mut csv = Csv::new(["region", "post_id", "cluster", "config_hash", "seed"])?;
        for (p, l) in data.posts.iter().zip(&c.labels) {
            let [h, s] = self.provenance();
            csv.row(vec![data.tag.clone(), p.id.clone(), l.to_string(), h, s])?;
        }
        csv.save(&self.out(&format!("assignments_{}.csv", data.tag)), outputs)?;
        Ok(labels)
    }

    pub fn write_plot_coords(&self, data: &RegionData, c: &Clustering, outputs: &mut Vec<PathBuf>) -> Result<()> {
        let y = stage("reduce", &data.tag, self.reduce_to(data, Reduction::Umap, 2))?;
        let mut csv = Csv::new(["region", "post_id", "x", "y", "cluster", "config_hash", "seed"])?;
        for (i, p) in data.posts.iter().enumerate() {
            let [h, s] = self.provenance();
            csv.row(vec![
                data.tag.clone(),
                p.id.clone(),
                y[[i, 0]].to_string(),
                y[[i, 1]].to_string(),
                c.labels[i].to_string(),
                h,
                s,
            ])?;
        }
        csv.save(&self.out(&format!("umap_coords_{}.csv", data.tag)), outputs)
    }

    pub fn write_features(&self, data: &RegionData, groups: &BTreeMap<String, FeatureTable>, outputs: &mut Vec<PathBuf>) -> Result<()> {
        let all = FeatureTable::concat(&groups.values().collect::<Vec<_>>())?;
        let path = self.out(&format!("features_{}.csv", data.tag));
        let dir = tempfile::tempdir_in(self.config.out_dir.as_path())?;
        let tmp = dir.path().join("features.csv");
        all.write_csv(&tmp)?;
        std::fs::rename(&tmp, &path)?;
        outputs.push(path);
        Ok(())
    }

    /// Accuracy by feature set × tau (mean over margins and regions), the
    /// per-margin breakdown at one tau and grouped importances at one
    /// margin, plus the long-form rows.
    pub fn write_threshold_tables(&self, rows: &[ThresholdRow], outputs: &mut Vec<PathBuf>) -> Result<()> {
        let t = &self.config.threshold;
        let order: Vec<String> = threshold_sets().into_iter().map(|(l, _)| l).collect();
        let present: Vec<&String> = order.iter().filter(|l| rows.iter().any(|r| &r.feature_set == *l)).collect();
        let cell = |set: &str, f: &dyn Fn(&ThresholdRow) -> bool| -> Vec<f64> {
            rows.iter().filter(|r| r.feature_set == set && f(r)).map(|r| r.accuracy).collect()
        };
        let fmt = |v: Vec<f64>| if v.is_empty() { String::new() } else { mean(&v).to_string() };

        let mut header = vec!["feature_set".to_string()];
        header.extend(t.taus.iter().map(|tau| format!("tau_{tau}")));
        header.extend(["config_hash".into(), "seed".into()]);
        let mut csv = Csv::new(header)?;
        for set in &present {
            let mut rec = vec![set.to_string()];
            rec.extend(t.taus.iter().map(|&tau| fmt(cell(set, &|r| r.tau == tau))));
            rec.extend(self.provenance());
            csv.row(rec)?;
        }
        csv.save(&self.out("table1_threshold_horizons.csv"), outputs)?;

        let tau = t.breakdown_tau;
        let mut header = vec!["feature_set".to_string()];
        header.extend(t.margins.iter().map(|m| format!("m_{m}")));
        header.extend(["mean", "sd", "config_hash", "seed"].map(String::from));
        let mut csv = Csv::new(header)?;
        for set in &present {
            let per_m: Vec<Option<f64>> = t
                .margins
                .iter()
                .map(|&m| {
                    let v = cell(set, &|r| r.tau == tau && r.m == m);
                    (!v.is_empty()).then(|| mean(&v))
                })
                .collect();
            let vals: Vec<f64> = per_m.iter().flatten().copied().collect();
            let mut rec = vec![set.to_string()];
            rec.extend(per_m.into_iter().map(opt));
            rec.push(if vals.is_empty() { String::new() } else { mean(&vals).to_string() });
            rec.push(if vals.is_empty() { String::new() } else { sd(&vals).to_string() });
            rec.extend(self.provenance());
            csv.row(rec)?;
        }
        csv.save(&self.out(&format!("table2_threshold_margins_tau{tau}.csv")), outputs)?;

        let groups = ["T", MOBILITY, GOVERNMENT, POSTS, CASES];
        let mut header = vec!["feature_set".to_string(), "tau".to_string()];
        header.extend(groups.iter().map(|g| g.to_string()));
        header.extend(["config_hash".into(), "seed".into()]);
        let mut csv = Csv::new(header)?;
        for set in present.iter().filter(|s| s.ends_with("++")) {
            for &tau in &t.taus {
                let sel: Vec<&ThresholdRow> = rows
                    .iter()
                    .filter(|r| &r.feature_set == *set && r.tau == tau && r.m == t.importance_margin)
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                let mut rec = vec![set.to_string(), tau.to_string()];
                rec.extend(groups.iter().map(|g| {
                    let v: Vec<f64> = sel.iter().map(|r| r.importance.get(*g).copied().unwrap_or(0.0)).collect();
                    mean(&v).to_string()
                }));
                rec.extend(self.provenance());
                csv.row(rec)?;
            }
        }
        csv.save(&self.out(&format!("table3_importance_m{}.csv", t.importance_margin)), outputs)?;

        let mut csv = Csv::new(["region", "feature_set", "tau", "m", "accuracy", "n_train", "n_test", "config_hash", "seed"])?;
        for r in rows {
            let mut rec = vec![
                r.region.clone(),
                r.feature_set.clone(),
                r.tau.to_string(),
                r.m.to_string(),
                r.accuracy.to_string(),
                r.n_train.to_string(),
                r.n_test.to_string(),
            ];
            rec.extend(self.provenance());
            csv.row(rec)?;
        }
        csv.save(&self.out("threshold_runs.csv"), outputs)
    }

    /// Run log, per-day predictions, the ablation table (model × set, RMSE
    /// averaged over horizons and regions, pooled Z-test against the model's
    /// univariate errors) and the per-horizon breakdown.
    pub fn write_forecast_tables(&self, runs: &[ForecastRun], outputs: &mut Vec<PathBuf>) -> Result<()> {
        let sig = self.significance(runs)?;
        let records: Vec<_> = runs.iter().zip(&sig).map(|(r, s)| r.record(s.as_ref())).collect();
        let mut buf = Vec::new();
        for rec in &records {
            let mut v = serde_json::to_value(rec)?;
            v["config_hash"] = self.hash.clone().into();
            serde_json::to_writer(&mut buf, &v)?;
            buf.push(b'\n');
        }
        let path = self.out("runs.jsonl");
        write_atomic(&path, &buf)?;
        outputs.push(path);

        let mut csv = Csv::new([
            "region", "model", "set", "horizon", "date", "actual", "mean", "q05", "q95", "config_hash", "seed",
        ])?;
        for r in runs {
            for (i, day) in r.days.iter().enumerate() {
                let mut d = r.draws[i].clone();
                d.sort_by(f64::total_cmp);
                let q = |p: f64| d[((d.len() - 1) as f64 * p).round() as usize].to_string();
                let mut rec = vec![
                    r.region.clone(),
                    r.model.to_string(),
                    r.set.clone(),
                    r.horizon.to_string(),
                    day.to_string(),
                    r.actual[i].to_string(),
                    r.mean[i].to_string(),
                    q(0.05),
                    q(0.95),
                ];
                rec.extend(self.provenance());
                csv.row(rec)?;
            }
        }
        csv.save(&self.out("predictions.csv"), outputs)?;

        let mut keys: Vec<(ModelKind, String)> = Vec::new();
        for r in runs {
            if !keys.iter().any(|(m, s)| *m == r.model && *s == r.set) {
                keys.push((r.model, r.set.clone()));
            }
        }
        let pooled = |model: ModelKind, set: &str, horizon: Option<usize>| -> Result<(f64, ErrorDistribution)> {
            let sel: Vec<&ForecastRun> = runs
                .iter()
                .filter(|r| r.model == model && r.set == set && horizon.is_none_or(|h| r.horizon == h))
                .collect();
            let rmse = mean(&sel.iter().map(|r| r.rmse).collect::<Vec<_>>());
            let mut samples = Vec::new();
            for r in &sel {
                samples.extend(self.error_distribution(r)?.samples);
            }
            Ok((rmse, ErrorDistribution::from_samples(samples)?))
        };
        let compare = |model: ModelKind, set: &str, horizon: Option<usize>| -> Result<Vec<String>> {
            let (rmse, dist) = pooled(model, set, horizon)?;
            let mut rec = vec![model.to_string(), set.to_string()];
            if let Some(h) = horizon {
                rec.push(h.to_string());
            }
            rec.push(rmse.to_string());
            let report = if set == "uni" {
                None
            } else {
                let (_, base) = pooled(model, "uni", horizon)?;
                z_test(&base, &dist, self.config.stats.denominator).ok()
            };
            rec.extend([
                opt(report.as_ref().map(|r| r.z)),
                opt(report.as_ref().map(|r| r.p)),
                report.map(|r| r.stars).unwrap_or_default(),
            ]);
            rec.extend(self.provenance());
            Ok(rec)
        };
        let mut csv = Csv::new(["model", "set", "rmse", "z", "p", "stars", "config_hash", "seed"])?;
        for (model, set) in &keys {
            csv.row(compare(*model, set, None)?)?;
        }
        csv.save(&self.out("table4_forecast_ablation.csv"), outputs)?;

        let mut csv = Csv::new(["model", "set", "horizon", "rmse", "z", "p", "stars", "config_hash", "seed"])?;
        for &h in &self.config.forecast.horizons {
            for (model, set) in &keys {
                csv.row(compare(*model, set, Some(h))?)?;
            }
        }
        csv.save(&self.out("table5_forecast_horizons.csv"), outputs)
    }

    pub fn write_grid(&self, grid: &GridOutcome, outputs: &mut Vec<PathBuf>) -> Result<()> {
        let mut csv = Csv::new(["region", "reduction", "algorithm", "k", "tau", "accuracy", "n_clusters", "config_hash", "seed"])?;
        for r in &grid.rows {
            let mut rec = vec![
                r.region.clone(),
                r.reduction.as_str().into(),
                r.algorithm.as_str().into(),
                r.k.map(|k| k.to_string()).unwrap_or_default(),
                r.tau.to_string(),
                r.accuracy.to_string(),
                r.n_clusters.to_string(),
            ];
            rec.extend(self.provenance());
            csv.row(rec)?;
        }
        csv.save(&self.out("grid.csv"), outputs)?;
        let mut csv = Csv::new(["region", "reduction", "algorithm", "k", "silhouette", "config_hash", "seed"])?;
        for r in &grid.silhouette {
            let mut rec = vec![
                r.region.clone(),
                r.reduction.as_str().into(),
                r.algorithm.as_str().into(),
                r.k.to_string(),
                r.silhouette.to_string(),
            ];
            rec.extend(self.provenance());
            csv.row(rec)?;
        }
        csv.save(&self.out("silhouette.csv"), outputs)
    }

    // ---- drivers ----

    pub fn ingest_all(&self) -> Result<Vec<RegionData>> {
        self.config.regions.iter().map(|r| self.ingest(r)).collect()
    }

    /// The HDBSCAN clustering and its cache key, which downstream stage
    /// keys chain on.
    pub fn cluster_keyed(&self, data: &RegionData) -> Result<(Clustering, String)> {
        let c = self.cluster(data)?;
        Ok((c, self.cluster_key(data, self.config.reduce.method, Algorithm::Hdbscan, None)))
    }

    /// Every per-region stage, from ingest to forecasting.
    fn run_region(&self, inputs: &RegionInputs) -> Result<(Vec<PathBuf>, Vec<ThresholdRow>, Vec<ForecastRun>)> {
        let mut outputs = Vec::new();
        let data = self.ingest(inputs)?;
        let (clustering, ckey) = self.cluster_keyed(&data)?;
        self.write_clusters(&data, &clustering, &mut outputs)?;
        if self.config.reduce.plot {
            self.write_plot_coords(&data, &clustering, &mut outputs)?;
        }
        let groups = self.features(&data, &clustering)?;
        self.write_features(&data, &groups, &mut outputs)?;
        let rows = self.threshold(&data, &groups, &ckey)?;
        let runs = self.forecast(&data, &groups, &ckey)?;
        Ok((outputs, rows, runs))
    }

    /// Runs every stage for every region (regions in parallel) and writes
    /// all tables.
    pub fn run(&self) -> Result<PipelineSummary> {
        std::fs::create_dir_all(&self.config.out_dir)?;
        let per_region: Vec<_> = self
            .config
            .regions
            .par_iter()
            .map(|r| self.run_region(r))
            .collect::<Result<_>>()?;
        let mut outputs = Vec::new();
        let mut threshold_rows = Vec::new();
        let mut runs = Vec::new();
        for (o, rows, r) in per_region {
            outputs.extend(o);
            threshold_rows.extend(rows);
            runs.extend(r);
        }
        self.write_threshold_tables(&threshold_rows, &mut outputs)?;
        stage("stats", "all", self.write_forecast_tables(&runs, &mut outputs))?;
        Ok(PipelineSummary {
            config_hash: self.hash.clone(),
            outputs,
            cache: self.cache.events(),
        })
    }

    pub fn run_grid(&self) -> Result<PipelineSummary> {
        std::fs::create_dir_all(&self.config.out_dir)?;
        let mut grid = GridOutcome {
            rows: Vec::new(),
            silhouette: Vec::new(),
        };
        for inputs in &self.config.regions {
            let data = self.ingest(inputs)?;
            let g = self.appendix_grid(&data)?;
            grid.rows.extend(g.rows);
            grid.silhouette.extend(g.silhouette);
        }
        let mut outputs = Vec::new();
        self.write_grid(&grid, &mut outputs)?;
        Ok(PipelineSummary {
            config_hash: self.hash.clone(),
            outputs,
            cache: self.cache.events(),
        })
    }
}

/// Stopping points for partial runs; each writes its own artifacts after
/// running (or loading from cache) everything upstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopAfter {
    Ingest,
    Reduce,
    Cluster,
    Features,
    Threshold,
    Forecast,
}

impl Pipeline {
    fn write_ingest(&self, data: &RegionData, outputs: &mut Vec<PathBuf>) -> Result<()> {
        let counts = daily_post_counts(&data.posts, &data.tag, &data.range);
        let mut series = vec![&data.caseload, &counts];
        series.extend(&data.mobility);
        series.extend(&data.government);
        let mut header = vec!["region".to_string(), "date".to_string()];
        header.extend(series.iter().map(|s| s.name.clone()));
        header.extend(["config_hash".into(), "seed".into()]);
        let mut csv = Csv::new(header)?;
        for (t, day) in data.range.days().enumerate() {
            let mut rec = vec![data.tag.clone(), day.to_string()];
            rec.extend(series.iter().map(|s| s.values[t].to_string()));
            rec.extend(self.provenance());
            csv.row(rec)?;
        }
        csv.save(&self.out(&format!("ingest_{}.csv", data.tag)), outputs)
    }

    fn write_reduced(&self, data: &RegionData, y: &Array2<f64>, outputs: &mut Vec<PathBuf>) -> Result<()> {
        let mut header = vec!["region".to_string(), "post_id".to_string()];
        header.extend((0..y.ncols()).map(|j| format!("d{j}")));
        header.extend(["config_hash".into(), "seed".into()]);
        let mut csv = Csv::new(header)?;
        for (p, row) in data.posts.iter().zip(y.rows()) {
            let mut rec = vec![data.tag.clone(), p.id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.extend(self.provenance());
            csv.row(rec)?;
        }
        csv.save(&self.out(&format!("reduced_{}.csv", data.tag)), outputs)
    }

    /// Runs the pipeline up to and including `stop` for every region.
    pub fn run_until(&self, stop: StopAfter) -> Result<PipelineSummary> {
        std::fs::create_dir_all(&self.config.out_dir)?;
        let per_region: Vec<_> = self
            .config
            .regions
            .par_iter()
            .map(|inputs| -> Result<_> {
                let mut outputs = Vec::new();
                let data = self.ingest(inputs)?;
                if stop == StopAfter::Ingest {
                    self.write_ingest(&data, &mut outputs)?;
                    return Ok((outputs, Vec::new(), Vec::new()));
                }
                if stop == StopAfter::Reduce {
                    let y = self.reduce(&data, self.config.reduce.method)?;
                    self.write_reduced(&data, &y, &mut outputs)?;
                    return Ok((outputs, Vec::new(), Vec::new()));
                }
                let (clustering, ckey) = self.cluster_keyed(&data)?;
                if stop == StopAfter::Cluster {
                    self.write_clusters(&data, &clustering, &mut outputs)?;
                    if self.config.reduce.plot {
                        self.write_plot_coords(&data, &clustering, &mut outputs)?;
                    }
                    return Ok((outputs, Vec::new(), Vec::new()));
                }
                let groups = self.features(&data, &clustering)?;
                match stop {
                    StopAfter::Features => {
                        self.write_features(&data, &groups, &mut outputs)?;
                        Ok((outputs, Vec::new(), Vec::new()))
                    }
                    StopAfter::Threshold => Ok((outputs, self.threshold(&data, &groups, &ckey)?, Vec::new())),
                    _ => Ok((outputs, Vec::new(), self.forecast(&data, &groups, &ckey)?)),
                }
            })
            .collect::<Result<_>>()?;
        let mut outputs = Vec::new();
        let mut rows = Vec::new();
        let mut runs = Vec::new();
        for (o, r, f) in per_region {
            outputs.extend(o);
            rows.extend(r);
            runs.extend(f);
        }
        match stop {
            StopAfter::Threshold => self.write_threshold_tables(&rows, &mut outputs)?,
            StopAfter::Forecast => stage("stats", "all", self.write_forecast_tables(&runs, &mut outputs))?,
            _ => {}
        }
        Ok(PipelineSummary {
            config_hash: self.hash.clone(),
            outputs,
            cache: self.cache.events(),
        })
    }
}

pub fn run_pipeline(config: PipelineConfig) -> Result<PipelineSummary> {
    Pipeline::new(config).run()
}

pub fn appendix_grid(config: PipelineConfig) -> Result<PipelineSummary> {
    Pipeline::new(config).run_grid()
}
