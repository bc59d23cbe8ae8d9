//! Isolation forest scoring.
//!
//! Each tree isolates a random subsample by recursive axis-aligned cuts: a
//! uniformly chosen dimension (among those that still vary inside the node)
//! and a uniform cut value inside the node's range. Points that get isolated
//! after few cuts are anomalous. Trees are grown to the usual height limit
//! `ceil(log2 ψ)`; unresolved leaves add the expected remaining depth `c(size)`.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::SpcConfig;
use crate::error::{Error, Result};
use crate::seed::rng_for;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Average path length of an unsuccessful BST search among `n` points.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        size: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct IsolationTree {
    nodes: Vec<Node>,
}

impl IsolationTree {
    fn grow(points: &Array2<f64>, sample: Vec<usize>, height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        tree.build(points, sample, 0, height_limit, rng);
        tree
    }

    fn build(
        &mut self,
        points: &Array2<f64>,
        rows: Vec<usize>,
        depth: usize,
        height_limit: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: rows.len() });
        if depth >= height_limit || rows.len() <= 1 {
            return id;
        }

        let ranges: Vec<(usize, f64, f64)> = (0..points.ncols())
            .filter_map(|d| {
                let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                    let v = points[[r, d]];
                    (lo.min(v), hi.max(v))
                });
                (hi > lo).then_some((d, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return id;
        }
        let (dim, lo, hi) = ranges[rng.random_range(0..ranges.len())];
        let value = rng.random_range(lo..hi);
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| points[[r, dim]] < value);

        let left = self.build(points, left_rows, depth + 1, height_limit, rng);
        let right = self.build(points, right_rows, depth + 1, height_limit, rng);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    fn path_length(&self, point: ndarray::ArrayView1<'_, f64>) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                Node::Leaf { size } => return depth + average_path_length(size),
                Node::Split {
                    dim,
                    value,
                    left,
                    right,
                } => {
                    node = if point[dim] < value { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }
}

/// Anomaly score `2^(-E[h(x)] / c(ψ))` for every row of `points`.
/// Higher means more anomalous; deterministic given `config.seed`.
pub fn isolation_forest_scores(points: &Array2<f64>, config: &SpcConfig) -> Result<Vec<f64>> {
    let (m, d) = points.dim();
    if m < 2 {
        return Err(Error::InsufficientData(format!(
            "isolation forest needs at least 2 points, got {m}"
        )));
    }
    if d == 0 {
        return Err(Error::Shape("points have zero dimensions".into()));
    }
    if config.trees == 0 {
        return Err(Error::Config("trees must be at least 1".into()));
    }
    if config.subsample < 2 {
        return Err(Error::Config("subsample must be at least 2".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("isolation forest input".into()));
    }
    let psi = config.subsample.min(m);
    let height_limit = (psi as f64).log2().ceil() as usize;

    let per_tree: Vec<Vec<f64>> = (0..config.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(config.seed, "iforest-tree", t as u64);
            let sample = index::sample(&mut rng, m, psi).into_vec();
            let tree = IsolationTree::grow(points, sample, height_limit, &mut rng);
            points.rows().into_iter().map(|row| tree.path_length(row)).collect()
        })
        .collect();

    let norm = average_path_length(psi);
    let scores = (0..m)
        .map(|i| {
            let total: f64 = per_tree.iter().map(|lengths| lengths[i]).sum();
            let mean = total / config.trees as f64;
            2f64.powf(-mean / norm)
        })
        .collect();
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn normalizer_small_cases() {
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
        // 2 H(2) - 2*2/3 with H approximated by ln + gamma
        let expected = 2.0 * (2f64.ln() + EULER_GAMMA) - 4.0 / 3.0;
        assert!((average_path_length(3) - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_points_score_equally() {
        let points = Array2::from_elem((7, 3), 0.25);
        let cfg = SpcConfig::new(5, 2, 11);
        let scores = isolation_forest_scores(&points, &cfg).unwrap();
        assert!(scores.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let cfg = SpcConfig::new(2, 2, 0);
        assert!(isolation_forest_scores(&Array2::zeros((1, 3)), &cfg).is_err());
        assert!(isolation_forest_scores(&Array2::zeros((4, 0)), &cfg).is_err());
    }

    #[test]
    fn scores_in_unit_interval_and_deterministic() {
        let points = Array2::from_shape_fn((12, 2), |(i, j)| ((i * 7 + j * 3) % 5) as f64);
        let cfg = SpcConfig::new(6, 2, 99);
        let a = isolation_forest_scores(&points, &cfg).unwrap();
        let b = isolation_forest_scores(&points, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&s| s > 0.0 && s <= 1.0));
    }
}
