//! Social-media density-cluster features for epidemic trend classification
//! and caseload forecasting.
//!
//! The pipeline runs sentence embeddings through UMAP and HDBSCAN, turns the
//! resulting clusters into daily post-count features, and evaluates them on
//! a threshold-classification task (random forest) and a multivariate
//! forecasting task (martingale, Gaussian process, transformer).

pub mod cluster;
pub mod dimred;
pub mod error;
pub mod features;
pub mod forecast;
pub mod ingest;
pub mod linalg;
pub mod report;
pub mod stats;
pub mod threshold;

pub use error::{Error, Result};
