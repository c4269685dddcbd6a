//! Dimensionality reduction of sentence embeddings: UMAP for the clustering
//! space and the 2-D plot coordinates, PCA as the linear comparator.

mod pca;
mod trust;
mod umap;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pca::fit_pca;
pub use trust::trustworthiness;
pub use umap::{fit_ab_curve, fit_umap, smooth_knn_distances};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub n_epochs: usize,
    pub out_dim: usize,
    pub seed: u64,
}

impl Default for UmapParams {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            n_epochs: 200,
            out_dim: 50,
            seed: 42,
        }
    }
}

impl UmapParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors < 2 {
            return Err(Error::invalid("n_neighbors must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.min_dist) {
            return Err(Error::invalid("min_dist must lie in [0, 1)"));
        }
        if self.out_dim == 0 {
            return Err(Error::invalid("out_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Array1<f64>,
    /// k×D, one orthonormal component per row.
    pub components: Array2<f64>,
    /// Eigenvalues of the sample covariance for the kept components.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmapProjection {
    pub params: UmapParams,
    pub a: f64,
    pub b: f64,
    /// Training points; the exact k-NN index is a scan over these.
    pub reference: Array2<f64>,
    /// Low-dimensional coordinates of the training points.
    pub embedding: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Projection {
    Pca(PcaProjection),
    Umap(UmapProjection),
}

impl Projection {
    pub fn in_dim(&self) -> usize {
        match self {
            Projection::Pca(p) => p.components.ncols(),
            Projection::Umap(u) => u.reference.ncols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Projection::Pca(p) => p.components.nrows(),
            Projection::Umap(u) => u.embedding.ncols(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Projection::Pca(_) => "pca",
            Projection::Umap(_) => "umap",
        }
    }

    /// Coordinates of the training set, when the projection retains them.
    pub fn training_embedding(&self) -> Option<&Array2<f64>> {
        match self {
            Projection::Pca(_) => None,
            Projection::Umap(u) => Some(&u.embedding),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

/// Projects new rows through a fitted projection.
pub fn transform(proj: &Projection, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != proj.in_dim() {
        return Err(Error::dim(proj.in_dim(), x.ncols()));
    }
    match proj {
        Projection::Pca(p) => Ok(pca::project(p, x)),
        Projection::Umap(u) => Ok(umap::transform(u, x)),
    }
}
