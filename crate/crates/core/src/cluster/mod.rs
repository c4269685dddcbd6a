//! Density clustering of the reduced embedding space plus the k-means and
//! mixture-model baselines it is compared against.

mod gmm;
mod hdbscan;
mod kmeans;
mod silhouette;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gmm::{gmm_fit, GaussianMixture};
pub use hdbscan::{
    assign_new, build_mst, condense_and_extract, core_distances, fit_hdbscan, CondensedNode, CondensedTree, Hierarchy,
    HdbscanParams, MstEdge,
};
pub use kmeans::{spherical_kmeans, SphericalKMeans};
pub use silhouette::{silhouette, silhouette_sweep};

pub const NOISE: i32 = -1;

/// The k grid searched with the silhouette score for KM and GMM.
pub const K_GRID: [usize; 6] = [25, 50, 75, 100, 125, 150];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Hdbscan,
    Km,
    Gmm,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Hdbscan => "hdbscan",
            Algorithm::Km => "km",
            Algorithm::Gmm => "gmm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: i32,
    pub size: usize,
    /// Excess-of-mass stability for HDBSCAN clusters, 0 for the baselines.
    pub stability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClusterParams {
    Density { min_cluster_size: usize, min_samples: usize },
    Partition { k: usize },
}

/// State retained by an HDBSCAN fit so that new points can be assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReference {
    #[serde(skip)]
    pub coords: Array2<f64>,
    pub core: Vec<f64>,
    pub mst: Vec<MstEdge>,
    pub tree: CondensedTree,
    /// Birth density of each selected cluster, indexed by label.
    pub cluster_birth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub algorithm: Algorithm,
    pub labels: Vec<i32>,
    pub clusters: Vec<ClusterSummary>,
    pub params: ClusterParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityReference>,
}

impl ClusterModel {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    pub(crate) fn from_labels(algorithm: Algorithm, labels: Vec<i32>, params: ClusterParams, k: usize) -> Self {
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        let clusters = sizes
            .into_iter()
            .enumerate()
            .map(|(id, size)| ClusterSummary {
                id: id as i32,
                size,
                stability: 0.0,
            })
            .collect();
        Self {
            algorithm,
            labels,
            clusters,
            params,
            density: None,
        }
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("coords.bin")
    }

    /// Writes the model as JSON; HDBSCAN reference coordinates go to a
    /// `.coords.bin` sidecar (u32 n, u32 k, then row-major little-endian f32).
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = BufWriter::new(File::create(path)?);
        serde_json::to_writer(json, self)?;
        if let Some(density) = &self.density {
            let (n, k) = density.coords.dim();
            let mut out = BufWriter::new(File::create(Self::sidecar_path(path))?);
            out.write_all(&(n as u32).to_le_bytes())?;
            out.write_all(&(k as u32).to_le_bytes())?;
            for v in density.coords.iter() {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
            out.flush()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut model: ClusterModel = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if let Some(density) = model.density.as_mut() {
            let mut bytes = Vec::new();
            BufReader::new(File::open(Self::sidecar_path(path))?).read_to_end(&mut bytes)?;
            if bytes.len() < 8 {
                return Err(Error::Validation("coordinate sidecar truncated".into()));
            }
            let n = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
            let k = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
            if bytes.len() != 8 + 4 * n * k {
                return Err(Error::Validation(format!("coordinate sidecar holds {} bytes, header says {n}x{k}", bytes.len())));
            }
            let values: Vec<f64> = bytes[8..]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            density.coords = Array2::from_shape_vec((n, k), values).expect("length checked");
        }
        Ok(model)
    }
}
