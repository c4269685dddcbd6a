//! Configuration, orchestration, cluster labels, synthetic fixtures and
//! table emission.

mod cache;
mod config;
mod labels;
mod pipeline;
mod synth;

pub use cache::{file_digest, CacheEvent, KeyBuilder, StageCache};
pub use config::{
    Dates, FeatureConfig, GridConfig, PipelineConfig, ReduceConfig, Reduction, RegionInputs, SeriesInput,
    StatsConfig, ThresholdConfig,
};
pub use labels::{label_clusters, stopwords, ClusterLabel, TOP_WORDS};
pub use pipeline::{
    appendix_grid, run_pipeline, threshold_sets, StopAfter, write_atomic, Clustering, GridOutcome, GridRow, Pipeline,
    PipelineSummary, RegionData, SilhouetteRow, ThresholdRow, BOW, CASES, GOVERNMENT, KEYWORDS, MOBILITY, POSTS,
    TEXT,
};
pub use synth::{synth_generate, SynthConfig, SynthCorpus, SynthManifest, SYNTH_FILES};
