//! Clustering menu used both for neuron reordering (rows as samples) and for
//! codebook initialization (scalars as samples).

mod bisecting;
mod exact1d;
mod hierarchical;
mod kmeans;
mod random;
mod spectral;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bisecting::bisecting_kmeans;
pub use exact1d::exact_kmeans_1d;
pub use hierarchical::{hierarchical, ward_generic};
pub use kmeans::{kmeans, lloyd, DEFAULT_MAX_ITER, DEFAULT_TOL, EXACT_1D_LIMIT};
pub use random::random_clustering;
pub use spectral::{graph_spectral, normalized_cut, SimilarityGraph};

/// Borrowed view over `n` samples of dimension `dim`, stored contiguously.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Samples<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "cannot view {} values as samples of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("clustering samples".into()));
        }
        Ok(Self { data, dim })
    }

    pub fn scalars(data: &'a [f64]) -> Result<Self> {
        Self::new(data, 1)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn raw(&self) -> &'a [f64] {
        self.data
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

impl ClusterResult {
    /// Build a result from a labelling: centroids are member means and inertia is
    /// the sum of squared distances to them.
    pub fn from_labels(samples: Samples<'_>, labels: Vec<usize>, k: usize) -> Self {
        let centroids = centroids_of(samples, &labels, k);
        let inertia = inertia_of(samples, &labels, &centroids);
        Self {
            labels,
            centroids,
            inertia,
        }
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Member means, computed relative to each cluster's first member so that a
/// cluster of identical points has a centroid exactly equal to that point.
pub(crate) fn centroids_of(samples: Samples<'_>, labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = samples.dim();
    let mut anchor: Vec<Option<usize>> = vec![None; k];
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        let a = *anchor[l].get_or_insert(i);
        let (p, q) = (samples.point(i), samples.point(a));
        for d in 0..dim {
            sums[l][d] += p[d] - q[d];
        }
        counts[l] += 1;
    }
    (0..k)
        .map(|c| match anchor[c] {
            Some(a) => {
                let base = samples.point(a);
                (0..dim)
                    .map(|d| base[d] + sums[c][d] / counts[c] as f64)
                    .collect()
            }
            None => vec![0.0; dim],
        })
        .collect()
}

pub(crate) fn inertia_of(samples: Samples<'_>, labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(samples.point(i), &centroids[l]))
        .sum()
}

pub(crate) fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::TooManyClusters { k, n });
    }
    Ok(())
}

/// Deterministic seed derivation for sub-problems.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringMethod {
    Random,
    KMeans,
    Bisecting,
    Graph,
    Hierarchical,
}

impl ClusteringMethod {
    pub const ALL: [ClusteringMethod; 5] = [
        ClusteringMethod::Random,
        ClusteringMethod::KMeans,
        ClusteringMethod::Bisecting,
        ClusteringMethod::Graph,
        ClusteringMethod::Hierarchical,
    ];

    pub fn cluster(self, samples: Samples<'_>, k: usize, seed: u64) -> Result<ClusterResult> {
        match self {
            ClusteringMethod::Random => random_clustering(samples, k, seed),
            ClusteringMethod::KMeans => kmeans(samples, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL),
            ClusteringMethod::Bisecting => bisecting_kmeans(samples, k, seed),
            ClusteringMethod::Graph => graph_spectral(samples, k, seed),
            ClusteringMethod::Hierarchical => hierarchical(samples, k),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClusteringMethod::Random => "random",
            ClusteringMethod::KMeans => "kmeans",
            ClusteringMethod::Bisecting => "bisecting",
            ClusteringMethod::Graph => "graph",
            ClusteringMethod::Hierarchical => "hierarchical",
        }
    }
}

impl fmt::Display for ClusteringMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClusteringMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClusteringMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown clustering method {s:?}")))
    }
}
