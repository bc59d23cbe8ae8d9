//! Spurious prototype correction.
//!
//! Two stages over the per-template spurious prototypes: drop the templates
//! an isolation forest finds most anomalous (keeping exactly `n_keep`), then
//! merge the survivors into `k_clusters` k-means centroids so near-duplicate
//! templates stop dominating the spurious distribution.

mod iforest;
pub(crate) mod kmeans;

pub use iforest::{average_path_length, isolation_forest_scores};
pub use kmeans::{kmeans_merge, wcss, KMeansResult};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpcConfig {
    /// Number of prototypes retained by outlier filtering.
    pub n_keep: usize,
    /// Number of merged centroids.
    pub k_clusters: usize,
    pub trees: usize,
    /// Per-tree subsample size; capped at the number of points.
    pub subsample: usize,
    pub seed: u64,
    pub max_kmeans_iters: usize,
    /// Rescale centroids to unit norm (matches prototype renormalization).
    pub renormalize: bool,
}

impl Default for SpcConfig {
    fn default() -> Self {
        SpcConfig::new(60, 20, 0)
    }
}

impl SpcConfig {
    pub fn new(n_keep: usize, k_clusters: usize, seed: u64) -> Self {
        SpcConfig {
            n_keep,
            k_clusters,
            trees: 100,
            subsample: 256,
            seed,
            max_kmeans_iters: 300,
            renormalize: true,
        }
    }

    /// Checks `2 <= k <= n <= m` plus the forest parameters.
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.k_clusters < 2 {
            return Err(Error::Config(format!(
                "k_clusters must be >= 2, got {}",
                self.k_clusters
            )));
        }
        if self.k_clusters > self.n_keep {
            return Err(Error::Config(format!(
                "k_clusters {} exceeds n_keep {}",
                self.k_clusters, self.n_keep
            )));
        }
        if self.n_keep > m {
            return Err(Error::Config(format!(
                "n_keep {} exceeds the {m} prototypes",
                self.n_keep
            )));
        }
        if self.trees == 0 {
            return Err(Error::Config("trees must be >= 1".into()));
        }
        if self.subsample < 2 {
            return Err(Error::Config("subsample must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub kept: Array2<f64>,
    /// Retained row indices in ascending order.
    pub kept_indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Keeps the `n_keep` rows with the lowest anomaly scores. Ties go to the
/// lower index; kept rows stay in their original order.
pub fn filter_outliers(points: &Array2<f64>, config: &SpcConfig) -> Result<FilterResult> {
    let m = points.nrows();
    if config.n_keep > m {
        return Err(Error::Config(format!(
            "n_keep {} exceeds the {m} points",
            config.n_keep
        )));
    }
    let scores = isolation_forest_scores(points, config)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut kept_indices = order[..config.n_keep].to_vec();
    kept_indices.sort_unstable();
    Ok(FilterResult {
        kept: points.select(Axis(0), &kept_indices),
        kept_indices,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpcReport {
    pub outlier_scores: Vec<f64>,
    pub kept_indices: Vec<usize>,
    /// Cluster id for each entry of `kept_indices`.
    pub cluster_assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
    pub kmeans_iterations: usize,
    pub warnings: Vec<String>,
}

impl SpcReport {
    pub fn centroid_matrix(&self) -> Array2<f64> {
        let k = self.centroids.len();
        let d = self.centroids.first().map_or(0, Vec::len);
        Array2::from_shape_fn((k, d), |(i, j)| self.centroids[i][j])
    }
}

/// Filters then clusters the spurious prototypes; returns the `k × D`
/// corrected prototypes and a report of both stages.
pub fn run_spc(spurious: &Array2<f64>, config: &SpcConfig) -> Result<(Array2<f64>, SpcReport)> {
    config.validate(spurious.nrows())?;
    let filtered = filter_outliers(spurious, config)?;
    let km = kmeans_merge(&filtered.kept, config)?;
    let mut warnings = Vec::new();
    if !km.reseeded.is_empty() {
        warnings.push(format!("k-means reseeded empty clusters {:?}", km.reseeded));
    }
    if !km.empty_clusters.is_empty() {
        warnings.push(format!("degenerate clusters with no members: {:?}", km.empty_clusters));
    }
    let report = SpcReport {
        outlier_scores: filtered.scores,
        kept_indices: filtered.kept_indices,
        cluster_assignment: km.assignment,
        centroids: km.centroids.rows().into_iter().map(|r| r.to_vec()).collect(),
        wcss: km.wcss,
        kmeans_iterations: km.iterations,
        warnings,
    };
    Ok((km.centroids, report))
}
