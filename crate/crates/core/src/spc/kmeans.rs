//! Lloyd's k-means with k-means++ seeding.

use ndarray::{Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::SpcConfig;
use crate::error::{Error, Result};
use crate::prototypes::normalize_rows_inplace;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `k × D`, renormalized when `config.renormalize` is set.
    pub centroids: Array2<f64>,
    /// Cluster id per input row.
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after every update step.
    pub wcss_history: Vec<f64>,
    /// Final within-cluster sum of squares (before renormalization).
    pub wcss: f64,
    pub iterations: usize,
    /// Clusters that had to be reseeded because they went empty.
    pub reseeded: Vec<usize>,
    /// Clusters with no assigned point at termination.
    pub empty_clusters: Vec<usize>,
}

pub(crate) fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lower index.
fn nearest(point: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn wcss(points: &Array2<f64>, centroids: &Array2<f64>, assignment: &[usize]) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(assignment)
        .map(|(p, &c)| sq_dist(p, centroids.row(c)))
        .sum()
}

fn plus_plus_seeds(points: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&dist) {
            Ok(weights) => weights.sample(rng),
            // every remaining point coincides with a chosen one
            Err(_) => (0..n).find(|i| !chosen.contains(i)).expect("k <= n"),
        };
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points.rows()) {
            *d = d.min(sq_dist(p, points.row(next)));
        }
    }
    chosen
}

/// Clusters the rows of `points` into `config.k_clusters` centroids.
pub fn kmeans_merge(points: &Array2<f64>, config: &SpcConfig) -> Result<KMeansResult> {
    let (n, _) = points.dim();
    let k = config.k_clusters;
    if k == 0 {
        return Err(Error::Config("k_clusters must be positive".into()));
    }
    if k > n {
        return Err(Error::Config(format!("k_clusters {k} exceeds the {n} points")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let mut rng = rng_for(config.seed, "kmeans", 0);
    let seeds = plus_plus_seeds(points, k, &mut rng);
    let mut centroids = points.select(ndarray::Axis(0), &seeds);

    let mut assignment: Vec<usize> = Vec::new();
    let mut wcss_history = Vec::new();
    let mut reseeded = Vec::new();
    let mut iterations = 0;
    for _ in 0..config.max_kmeans_iters.max(1) {
        let next: Vec<usize> = points.rows().into_iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
        iterations += 1;

        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (p, &c) in points.rows().into_iter().zip(&assignment) {
            let mut row = sums.row_mut(c);
            row += &p;
            counts[c] += 1;
        }
        let mut used = Vec::new();
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = &sums.row(c) / count as f64;
                centroids.row_mut(c).assign(&mean);
            } else {
                // farthest point from its own centroid, not already used for reseeding
                let far = (0..n)
                    .filter(|i| !used.contains(i))
                    .map(|i| (i, sq_dist(points.row(i), centroids.row(assignment[i]))))
                    .fold(
                        (usize::MAX, f64::NEG_INFINITY),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    )
                    .0;
                used.push(far);
                reseeded.push(c);
                centroids.row_mut(c).assign(&points.row(far));
            }
        }
        wcss_history.push(wcss(points, &centroids, &assignment));
    }

    let mut counts = vec![0usize; k];
    assignment.iter().for_each(|&c| counts[c] += 1);
    let empty_clusters = (0..k).filter(|&c| counts[c] == 0).collect();
    let final_wcss = wcss(points, &centroids, &assignment);
    if config.renormalize {
        normalize_rows_inplace(&mut centroids)?;
    }
    Ok(KMeansResult {
        centroids,
        assignment,
        wcss_history,
        wcss: final_wcss,
        iterations,
        reseeded,
        empty_clusters,
    })
}
