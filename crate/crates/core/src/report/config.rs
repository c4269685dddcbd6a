//! Pipeline configuration, read from TOML.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{HdbscanParams, K_GRID};
use crate::error::{Error, Result};
use crate::forecast::ForecastConfig;
use crate::ingest::{DateRange, SeriesSchema};
use crate::stats::{ErrorKind, ZDenominator, DEFAULT_SAMPLES};
use crate::threshold::{ForestParams, SplitMode, DEFAULT_MARGINS, DEFAULT_TAUS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dates {
    pub threshold_start: NaiveDate,
    pub threshold_end: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

impl Default for Dates {
    fn default() -> Self {
        let d = |y, m, d| NaiveDate::from_ymd_opt(y, m, d).expect("valid date");
        Self {
            threshold_start: d(2020, 3, 7),
            threshold_end: d(2021, 1, 17),
            train_end: d(2020, 12, 31),
            test_start: d(2021, 1, 1),
            test_end: d(2021, 3, 1),
        }
    }
}

impl Dates {
    pub fn threshold(&self) -> DateRange {
        DateRange {
            start: self.threshold_start,
            end: self.threshold_end,
        }
    }

    pub fn test(&self) -> DateRange {
        DateRange {
            start: self.test_start,
            end: self.test_end,
        }
    }

    /// Every day any task touches.
    pub fn span(&self) -> DateRange {
        DateRange {
            start: self.threshold_start,
            end: self.threshold_end.max(self.test_end),
        }
    }

    fn validate(&self) -> Result<()> {
        let ordered = self.threshold_start <= self.threshold_end
            && self.threshold_start < self.train_end
            && self.train_end < self.test_start
            && self.test_start <= self.test_end;
        if !ordered {
            return Err(Error::Config(format!("date ranges are not well ordered: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesInput {
    pub path: PathBuf,
    #[serde(flatten)]
    pub schema: SeriesSchema,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionInputs {
    pub tag: String,
    pub posts: PathBuf,
    pub embeddings: PathBuf,
    pub caseload: SeriesInput,
    #[serde(default)]
    pub mobility: Vec<SeriesInput>,
    #[serde(default)]
    pub government: Vec<SeriesInput>,
}

impl RegionInputs {
    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        [&mut self.posts, &mut self.embeddings, &mut self.caseload.path]
            .into_iter()
            .chain(self.mobility.iter_mut().map(|s| &mut s.path))
            .chain(self.government.iter_mut().map(|s| &mut s.path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Umap,
    Pca,
}

impl Reduction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Reduction::Umap => "umap",
            Reduction::Pca => "pca",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReduceConfig {
    pub method: Reduction,
    pub out_dim: usize,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub n_epochs: usize,
    /// Also emit 2-D UMAP coordinates for plotting.
    pub plot: bool,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        Self {
            method: Reduction::Umap,
            out_dim: 50,
            n_neighbors: 15,
            min_dist: 0.1,
            n_epochs: 200,
            plot: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Trailing moving-average window applied to every feature and to the
    /// caseload before labelling.
    pub moving_average: usize,
    /// Prescribed word list for the keyword-count baseline.
    pub keywords: Vec<String>,
    /// Size of the over-represented-word lexicon for the bag-of-words baseline.
    pub bow_words: usize,
    /// Horizon (days) that defines the rising days the bag-of-words lexicon
    /// is contrasted on.
    pub bow_tau: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            moving_average: 7,
            keywords: [
                "covid",
                "coronavirus",
                "virus",
                "pandemic",
                "cases",
                "symptoms",
                "fever",
                "cough",
                "test",
                "testing",
                "positive",
                "hospital",
                "quarantine",
                "lockdown",
                "mask",
                "vaccine",
            ]
            .map(String::from)
            .to_vec(),
            bow_words: 100,
            bow_tau: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    pub taus: Vec<usize>,
    pub margins: Vec<f64>,
    pub top: usize,
    pub split: SplitMode,
    pub forest: ForestParams,
    /// Horizon of the per-margin breakdown table.
    pub breakdown_tau: usize,
    /// Margin of the grouped-importance table.
    pub importance_margin: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            taus: DEFAULT_TAUS.to_vec(),
            margins: DEFAULT_MARGINS.to_vec(),
            top: crate::features::DEFAULT_TOP,
            split: SplitMode::Random,
            forest: ForestParams::default(),
            breakdown_tau: 14,
            importance_margin: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    pub samples: usize,
    pub kind: ErrorKind,
    pub denominator: ZDenominator,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            kind: ErrorKind::Absolute,
            denominator: ZDenominator::SummedVariance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub ks: Vec<usize>,
    pub taus: Vec<usize>,
    pub margins: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            ks: K_GRID.to_vec(),
            taus: DEFAULT_TAUS.to_vec(),
            margins: DEFAULT_MARGINS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Stage cache; defaults to `<out_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub dates: Dates,
    pub regions: Vec<RegionInputs>,
    #[serde(default)]
    pub reduce: ReduceConfig,
    #[serde(default)]
    pub cluster: HdbscanParams,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub threshold: ThresholdConfig,
    #[serde(default)]
    pub forecast: ForecastConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub grid: GridConfig,
}

fn default_seed() -> u64 {
    42
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths resolve against the file's
    /// directory, and every input file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.check_inputs()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(c) = self.cache_dir.as_mut() {
            fix(c);
        }
        for r in &mut self.regions {
            r.paths_mut().for_each(fix);
        }
    }

    pub fn check_inputs(&self) -> Result<()> {
        for r in &self.regions {
            let mut r = r.clone();
            let tag = r.tag.clone();
            let missing = r.paths_mut().find(|p| !p.is_file()).cloned();
            if let Some(missing) = missing {
                return Err(Error::Config(format!("region {tag}: input file {} does not exist", missing.display())));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dates.validate()?;
        if self.regions.is_empty() {
            return Err(Error::Config("no regions configured".into()));
        }
        let mut tags: Vec<&str> = self.regions.iter().map(|r| r.tag.as_str()).collect();
        tags.sort_unstable();
        if tags.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("region tags must be unique".into()));
        }
        if self.features.moving_average == 0 {
            return Err(Error::Config("moving_average must be at least 1".into()));
        }
        if self.threshold.taus.is_empty() || self.threshold.margins.is_empty() {
            return Err(Error::Config("threshold taus and margins must be non-empty".into()));
        }
        if self.forecast.horizons.is_empty() || self.forecast.models.is_empty() {
            return Err(Error::Config("forecast horizons and models must be non-empty".into()));
        }
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }

    pub fn region(&self, tag: &str) -> Result<&RegionInputs> {
        self.regions
            .iter()
            .find(|r| r.tag == tag)
            .ok_or_else(|| Error::Config(format!("region `{tag}` is not configured")))
    }

    /// Keeps only the named region.
    pub fn restrict_to(&mut self, tag: &str) -> Result<()> {
        let r = self.region(tag)?.clone();
        self.regions = vec![r];
        Ok(())
    }

    /// SHA-256 over the analysis settings, independent of where the inputs
    /// and outputs live.
    pub fn hash(&self) -> String {
        let mut tagged = self.clone();
        tagged.out_dir = PathBuf::new();
        tagged.cache_dir = None;
        for r in &mut tagged.regions {
            r.paths_mut().for_each(|p| *p = p.file_name().map(PathBuf::from).unwrap_or_default());
        }
        let json = serde_json::to_vec(&tagged).expect("config serialises");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
out_dir = "out"

[[regions]]
tag = "WA"
posts = "posts.jsonl"
embeddings = "embeddings.jsonl"
caseload = { path = "cases.csv", date_column = "date", value_column = "cases" }
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.dates, Dates::default());
        assert_eq!(cfg.threshold.taus, vec![7, 14, 21, 28]);
        assert_eq!(cfg.cluster.min_cluster_size, 25);
        assert_eq!(cfg.regions[0].caseload.schema.value_column, "cases");
    }

    #[test]
    fn disordered_dates_are_rejected() {
        let text = format!("{MINIMAL}\n[dates]\nthreshold_start = \"2020-03-07\"\nthreshold_end = \"2021-01-17\"\ntrain_end = \"2021-02-01\"\ntest_start = \"2021-01-01\"\ntest_end = \"2021-03-01\"\n");
        assert!(matches!(PipelineConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn missing_inputs_fail_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let err = PipelineConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
    }

    #[test]
    fn hash_ignores_locations_but_not_settings() {
        let a = PipelineConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        b.regions[0].posts = PathBuf::from("/data/posts.jsonl");
        assert_eq!(a.hash(), b.hash());
        b.seed = 7;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn round_trips_through_toml() {
        let a = PipelineConfig::from_toml(MINIMAL).unwrap();
        let b = PipelineConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
