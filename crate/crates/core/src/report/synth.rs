//! Synthetic corpus with a planted leading-indicator cluster.

use std::path::Path;

use chrono::{Duration, NaiveDate};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::config::{Dates, PipelineConfig, ReduceConfig, RegionInputs, SeriesInput};
use crate::error::{Error, Result};
use crate::ingest::{SeriesSchema, write_embeddings, write_posts, write_series_csv, DailySeries, EmbeddingMatrix, PostRecord};

const TOPIC_WORDS: &[&str] = &[
    "mask", "vaccine", "testing", "hospital", "lockdown", "school", "restaurant", "travel", "symptoms", "fever",
    "cough", "quarantine", "distancing", "governor", "county", "outbreak", "nursing", "clinic", "shortage", "grocery",
    "unemployment", "rent", "stimulus", "protest", "election", "ventilator", "icu", "nurse", "doctor", "pharmacy",
    "booster", "dose", "appointment", "variant", "antibody", "swab", "lab", "results", "positive", "negative",
    "contact", "tracing", "exposure", "isolation", "workplace", "office", "remote", "zoom", "campus", "students",
    "teachers", "daycare", "parents", "holiday", "thanksgiving", "christmas", "gathering", "wedding", "funeral", "church",
    "gym", "bar", "brewery", "park", "beach", "hiking", "ferry", "airport", "flight", "border",
    "mandate", "order", "reopening", "phase", "capacity", "curfew", "fine", "police", "sheriff", "lawsuit",
    "data", "dashboard", "chart", "curve", "trend", "spike", "surge", "wave", "peak", "plateau",
    "deaths", "cases", "ward", "staff", "overtime", "supply", "gloves", "sanitizer", "toilet", "paper",
    "delivery", "takeout", "curbside", "drive", "thru", "line", "wait", "hours", "weekend", "weekday",
    "smoke", "fire", "weather", "rain", "snow", "ferries", "transit", "bus", "train", "commute",
];

const FILLER_WORDS: &[&str] = &[
    "people", "think", "really", "know", "going", "time", "good", "still", "right", "want", "need", "way", "make",
    "see", "get", "thing", "things", "year", "day", "days", "week", "much", "even", "well", "back", "lot", "also",
    "sure", "said", "say", "one", "two", "new", "last", "first", "long", "great", "little", "since", "around",
];

const STOPWORD_SAMPLE: &[&str] = &["the", "and", "to", "of", "a", "in", "is", "it", "that", "for"];

const VOCAB_WEIGHTS: [f64; 5] = [5.0, 4.0, 3.0, 2.0, 1.0];
const TOPIC_TOKENS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub region: String,
    pub start: NaiveDate,
    pub n_days: usize,
    /// Number of topic blobs.
    pub n_clusters: usize,
    /// How many of the blobs carry the leading signal.
    pub n_signal: usize,
    /// Days by which the signal blob leads the caseload increase.
    pub lead: usize,
    /// Ratio of the signal's standard deviation to its added noise.
    pub snr: f64,
    pub dim: usize,
    /// Standard deviation of blob centres.
    pub center_spread: f64,
    /// Standard deviation of posts around their blob centre.
    pub blob_spread: f64,
    pub signal_base: f64,
    pub signal_gain: f64,
    /// Mean daily posts of each background blob.
    pub background_rate: f64,
    /// Mean daily posts belonging to no blob.
    pub noise_rate: f64,
    pub n_waves: usize,
    /// Expected daily cases outside the waves.
    pub case_base: f64,
    /// Standard deviation of the log reporting factor.
    pub report_noise: f64,
    /// Day-to-day autocorrelation of the log reporting factor.
    pub report_persistence: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            region: "SYN".into(),
            start: NaiveDate::from_ymd_opt(2020, 3, 7).expect("valid date"),
            n_days: 360,
            n_clusters: 8,
            n_signal: 1,
            lead: 7,
            snr: 5.0,
            dim: 50,
            center_spread: 0.6,
            blob_spread: 1.0,
            signal_base: 7.5,
            signal_gain: 2.5,
            background_rate: 0.6,
            noise_rate: 0.5,
            n_waves: 2,
            case_base: 20.0,
            report_noise: 0.3,
            report_persistence: 0.95,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lead == 0 {
            return Err(Error::invalid("lead must be at least 1 day"));
        }
        if self.n_days <= self.lead + 28 {
            return Err(Error::invalid(format!("n_days must exceed lead + 28 (= {})", self.lead + 28)));
        }
        if self.n_clusters == 0 || self.n_clusters * VOCAB_WEIGHTS.len() > TOPIC_WORDS.len() {
            return Err(Error::invalid(format!(
                "n_clusters must be between 1 and {}",
                TOPIC_WORDS.len() / VOCAB_WEIGHTS.len()
            )));
        }
        if self.n_signal == 0 || self.n_signal > self.n_clusters {
            return Err(Error::invalid("n_signal must be between 1 and n_clusters"));
        }
        if !(self.snr > 0.0) || self.dim < 2 || !(self.report_noise >= 0.0) || !(0.0..1.0).contains(&self.report_persistence) {
            return Err(Error::invalid("snr must be positive, dim at least 2, report noise non-negative and persistence in [0, 1)"));
        }
        Ok(())
    }
}

/// Ground truth for a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub signal_clusters: Vec<usize>,
    /// Planted words per blob, most frequent first.
    pub vocab: Vec<Vec<String>>,
    pub cluster_sizes: Vec<usize>,
    pub noise_posts: usize,
    /// Blob of every post in file order, `-1` for unclustered posts.
    pub true_labels: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub posts: Vec<PostRecord>,
    pub embeddings: EmbeddingMatrix,
    /// Reported daily new cases.
    pub caseload: DailySeries,
    /// Noise-free epidemic curve the signal blob follows.
    pub expected: DailySeries,
    pub mobility: DailySeries,
    pub government: DailySeries,
    pub manifest: SynthManifest,
}

/// Expected daily new cases: a baseline plus logistic pulses (the
/// derivative of a logistic curve).
fn epidemic_curve(cfg: &SynthConfig, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let spacing = len as f64 / (cfg.n_waves.max(1) as f64 + 0.5);
    let waves: Vec<(f64, f64, f64)> = (0..cfg.n_waves)
        .map(|w| {
            let centre = spacing * (w as f64 + 0.75) + rng.random_range(-0.15..0.15) * spacing;
            let width = rng.random_range(4.0..8.0);
            let peak = rng.random_range(200.0..800.0);
            (centre, width, peak)
        })
        .collect();
    (0..len)
        .map(|t| {
            cfg.case_base
                + waves
                    .iter()
                    .map(|&(c, s, p)| {
                        let x = (t as f64 - c) / (2.0 * s);
                        p / x.cosh().powi(2)
                    })
                    .sum::<f64>()
        })
        .collect()
}

/// Reported cases: Poisson counts around the expected curve scaled by a
/// slowly varying log-normal reporting factor.
fn reported_cases(expected: &[f64], noise: f64, persistence: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let step = Normal::new(0.0, noise * (1.0 - persistence * persistence).sqrt()).expect("finite noise");
    let mut level = Normal::new(0.0, noise).expect("finite noise").sample(rng);
    expected
        .iter()
        .map(|&lambda| {
            level = persistence * level + step.sample(rng);
            Poisson::new(lambda * level.exp()).expect("positive rate").sample(rng)
        })
        .collect()
}

fn smoothed_walk(len: usize, start: f64, step: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, step).expect("positive step");
    let mut level = start;
    let raw: Vec<f64> = (0..len)
        .map(|_| {
            level += normal.sample(rng);
            level
        })
        .collect();
    (0..len)
        .map(|t| {
            let lo = t.saturating_sub(6);
            raw[lo..=t].iter().sum::<f64>() / (t - lo + 1) as f64
        })
        .collect()
}

fn standardise(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    v.iter().map(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 }).collect()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_days;
    let day = |t: usize| cfg.start + Duration::days(t as i64);

    // the epidemic runs `lead` days past the corpus so the signal has a future
    // to copy; increase[t] is the change from day t - 1 to day t
    let expected_ext = epidemic_curve(cfg, n + cfg.lead, &mut rng);
    let increase: Vec<f64> = (0..expected_ext.len())
        .map(|t| if t == 0 { 0.0 } else { expected_ext[t] - expected_ext[t - 1] })
        .collect();
    let z = standardise(&increase);
    let caseload = DailySeries::new(
        cfg.region.clone(),
        "cases",
        cfg.start,
        reported_cases(&expected_ext[..n], cfg.report_noise, cfg.report_persistence, &mut rng),
    );
    let expected = DailySeries::new(cfg.region.clone(), "expected_cases", cfg.start, expected_ext[..n].to_vec());
    let mobility = DailySeries::new(cfg.region.clone(), "mobility", cfg.start, smoothed_walk(n, -10.0, 2.0, &mut rng));
    let government = DailySeries::new(
        cfg.region.clone(),
        "stringency",
        cfg.start,
        smoothed_walk(n, 50.0, 3.0, &mut rng).into_iter().map(|v| v.clamp(0.0, 100.0)).collect(),
    );

    let mut signal_clusters = rand::seq::index::sample(&mut rng, cfg.n_clusters, cfg.n_signal).into_vec();
    signal_clusters.sort_unstable();
    let mut words: Vec<&str> = TOPIC_WORDS.to_vec();
    words.shuffle(&mut rng);
    let vocab: Vec<Vec<String>> = (0..cfg.n_clusters)
        .map(|c| words[c * 5..c * 5 + 5].iter().map(|w| w.to_string()).collect())
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centers = Array2::from_shape_fn((cfg.n_clusters, cfg.dim), |_| cfg.center_spread * unit.sample(&mut rng));
    let background: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| {
            let step = Normal::new(0.0, 0.2).expect("positive step");
            let mut level = 0.0f64;
            (0..n)
                .map(|_| {
                    level = 0.9 * level + step.sample(&mut rng);
                    cfg.background_rate * level.exp()
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 1.0 / cfg.snr).expect("positive noise scale");

    // (day, blob or -1)
    let mut plan: Vec<(usize, i32)> = Vec::new();
    for t in 0..n {
        for c in 0..cfg.n_clusters {
            let count = if signal_clusters.contains(&c) {
                let rate = cfg.signal_base + cfg.signal_gain * (z[t + cfg.lead] + noise.sample(&mut rng));
                rate.round().max(0.0) as usize
            } else {
                Poisson::new(background[c][t]).map_or(0.0, |p| p.sample(&mut rng)) as usize
            };
            plan.extend(std::iter::repeat_n((t, c as i32), count));
        }
        let noise_count = Poisson::new(cfg.noise_rate).map_or(0.0, |p| p.sample(&mut rng)) as usize;
        plan.extend(std::iter::repeat_n((t, -1), noise_count));
    }

    let vocab_total: f64 = VOCAB_WEIGHTS.iter().sum();
    let noise_scale = (cfg.blob_spread * cfg.blob_spread + cfg.center_spread * cfg.center_spread).sqrt();
    let mut posts = Vec::with_capacity(plan.len());
    let mut vectors = Array2::<f32>::zeros((plan.len(), cfg.dim));
    let mut cluster_sizes = vec![0usize; cfg.n_clusters];
    for (i, &(t, blob)) in plan.iter().enumerate() {
        let mut tokens = Vec::with_capacity(TOPIC_TOKENS + 3);
        if blob >= 0 {
            let b = blob as usize;
            cluster_sizes[b] += 1;
            for _ in 0..TOPIC_TOKENS {
                let mut u = rng.random::<f64>() * vocab_total;
                let mut k = 0;
                while u >= VOCAB_WEIGHTS[k] && k + 1 < VOCAB_WEIGHTS.len() {
                    u -= VOCAB_WEIGHTS[k];
                    k += 1;
                }
                tokens.push(vocab[b][k].clone());
            }
            for j in 0..cfg.dim {
                vectors[[i, j]] = (centers[[b, j]] + cfg.blob_spread * unit.sample(&mut rng)) as f32;
            }
        } else {
            for j in 0..cfg.dim {
                vectors[[i, j]] = (noise_scale * unit.sample(&mut rng)) as f32;
            }
        }
        for _ in 0..2 {
            tokens.push(STOPWORD_SAMPLE[rng.random_range(0..STOPWORD_SAMPLE.len())].to_string());
        }
        tokens.push(FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())].to_string());
        posts.push(PostRecord {
            id: format!("syn{:06}", i),
            day: day(t),
            region: cfg.region.clone(),
            tokens,
        });
    }
    let ids = posts.iter().map(|p| p.id.clone()).collect();
    let true_labels: Vec<i32> = plan.iter().map(|&(_, b)| b).collect();
    let manifest = SynthManifest {
        config: cfg.clone(),
        signal_clusters,
        vocab,
        cluster_sizes,
        noise_posts: true_labels.iter().filter(|&&l| l < 0).count(),
        true_labels,
    };
    Ok(SynthCorpus {
        posts,
        embeddings: EmbeddingMatrix { ids, vectors },
        caseload,
        expected,
        mobility,
        government,
        manifest,
    })
}

pub const SYNTH_FILES: [&str; 7] = [
    "posts.jsonl",
    "embeddings.jsonl",
    "caseload.csv",
    "mobility.csv",
    "government.csv",
    "manifest.json",
    "pipeline.toml",
];

impl SynthCorpus {
    /// Writes the corpus files named in [`SYNTH_FILES`] into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_posts(&dir.join(SYNTH_FILES[0]), &self.posts)?;
        write_embeddings(&dir.join(SYNTH_FILES[1]), &self.embeddings)?;
        write_series_csv(&dir.join(SYNTH_FILES[2]), &self.caseload)?;
        write_series_csv(&dir.join(SYNTH_FILES[3]), &self.mobility)?;
        write_series_csv(&dir.join(SYNTH_FILES[4]), &self.government)?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(dir.join(SYNTH_FILES[5]), manifest + "\n")?;
        std::fs::write(dir.join(SYNTH_FILES[6]), self.pipeline_config().to_toml()?)?;
        Ok(())
    }

    /// A pipeline config over the written files (paths relative to the
    /// corpus directory). The test window is the last 60 days, training
    /// ends the day before, and threshold labels run to 43 days before the
    /// end so that every horizon stays inside the corpus.
    pub fn pipeline_config(&self) -> PipelineConfig {
        let cfg = &self.manifest.config;
        let end = cfg.start + Duration::days(cfg.n_days as i64 - 1);
        let series = |file: &str, name: &str| SeriesInput {
            path: file.into(),
            schema: SeriesSchema::new("date", name),
        };
        PipelineConfig {
            seed: cfg.seed,
            out_dir: "out".into(),
            cache_dir: None,
            dates: Dates {
                threshold_start: cfg.start,
                threshold_end: end - Duration::days(43),
                train_end: end - Duration::days(60),
                test_start: end - Duration::days(59),
                test_end: end,
            },
            regions: vec![RegionInputs {
                tag: cfg.region.clone(),
                posts: SYNTH_FILES[0].into(),
                embeddings: SYNTH_FILES[1].into(),
                caseload: series(SYNTH_FILES[2], &self.caseload.name),
                mobility: vec![series(SYNTH_FILES[3], &self.mobility.name)],
                government: vec![series(SYNTH_FILES[4], &self.government.name)],
            }],
            reduce: ReduceConfig {
                out_dim: 5,
                ..ReduceConfig::default()
            },
            cluster: Default::default(),
            features: Default::default(),
            threshold: Default::default(),
            forecast: Default::default(),
            stats: Default::default(),
            grid: Default::default(),
        }
    }

    /// Daily post counts of each planted blob over the corpus days.
    pub fn true_cluster_counts(&self) -> Array2<f64> {
        let cfg = &self.manifest.config;
        let mut counts = Array2::zeros((cfg.n_days, cfg.n_clusters));
        for (post, &label) in self.posts.iter().zip(&self.manifest.true_labels) {
            if label >= 0 {
                let t = (post.day - cfg.start).num_days() as usize;
                counts[[t, label as usize]] += 1.0;
            }
        }
        counts
    }
}
