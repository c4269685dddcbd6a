use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rayon::prelude::*;

use super::{gmm_fit, spherical_kmeans, Algorithm, NOISE};
use crate::error::{Error, Result};
use crate::linalg::euclidean;

/// Mean silhouette over non-noise points. Singleton clusters score 0.
pub fn silhouette(x: ArrayView2<f64>, labels: &[i32]) -> Result<f64> {
    if labels.len() != x.nrows() {
        return Err(Error::dim(x.nrows(), labels.len()));
    }
    let mut members: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != NOISE {
            members.entry(l).or_default().push(i);
        }
    }
    if members.len() < 2 {
        return Err(Error::invalid(format!(
            "silhouette is undefined for {} cluster(s)",
            members.len()
        )));
    }
    let groups: Vec<(i32, Vec<usize>)> = members.into_iter().collect();
    let points: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, (_, idx))| idx.iter().map(move |&i| (i, g)))
        .collect();

    let scores: Vec<f64> = points
        .par_iter()
        .map(|&(i, g)| {
            let own = &groups[g].1;
            if own.len() == 1 {
                return 0.0;
            }
            let a = own.iter().filter(|&&j| j != i).map(|&j| euclidean(x.row(i), x.row(j))).sum::<f64>()
                / (own.len() - 1) as f64;
            let b = groups
                .iter()
                .enumerate()
                .filter(|(h, _)| *h != g)
                .map(|(_, (_, idx))| idx.iter().map(|&j| euclidean(x.row(i), x.row(j))).sum::<f64>() / idx.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Silhouette score for each k of a partitioning baseline.
pub fn silhouette_sweep(x: ArrayView2<f64>, algorithm: Algorithm, ks: &[usize], seed: u64) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| {
            let model = match algorithm {
                Algorithm::Km => spherical_kmeans(x, k, seed)?,
                Algorithm::Gmm => gmm_fit(x, k, seed)?,
                Algorithm::Hdbscan => return Err(Error::invalid("silhouette sweep is for km/gmm")),
            };
            Ok((k, silhouette(x, &model.labels)?))
        })
        .collect()
}
