//! Zero-shot classification and N-way K-shot episodic evaluation.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterParams};
use crate::embed_store::EmbeddingArchive;
use crate::error::{Error, Result};
use crate::losses::{argmax_rows, class_logits, spurious_kl_loss};
use crate::seed::rng_for;
use crate::spc::kmeans::sq_dist;

/// Predicted class per row (argmax of the class logits; ties go low).
pub fn zero_shot_classify(features: &Array2<f64>, class_protos: &Array2<f64>, temperature: f64) -> Result<Vec<usize>> {
    Ok(argmax_rows(&class_logits(features, class_protos, temperature)?))
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / predicted.len() as f64
}

/// Similarity used for nearest-prototype decisions inside an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// Archive class indices; position in this list is the episode label.
    pub classes: Vec<usize>,
    /// `way × shot` archive row indices.
    pub support: Vec<Vec<usize>>,
    /// `way × query` archive row indices.
    pub query: Vec<Vec<usize>>,
}

/// Samples `count` episodes; episode `t` draws from its own derived stream.
pub fn sample_episodes(
    images: &EmbeddingArchive,
    way: usize,
    shot: usize,
    query: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if way < 2 || shot == 0 || query == 0 {
        return Err(Error::Config(format!(
            "need way >= 2, shot >= 1, query >= 1 (got {way}/{shot}/{query})"
        )));
    }
    let by_class = images.rows_by_class();
    let eligible: Vec<usize> = (0..by_class.len())
        .filter(|&c| by_class[c].len() >= shot + query)
        .collect();
    if eligible.len() < way {
        return Err(Error::InsufficientData(format!(
            "{way}-way episodes need {way} classes with >= {} samples; only {} qualify",
            shot + query,
            eligible.len()
        )));
    }
    let episodes = (0..count)
        .map(|t| {
            let mut rng = rng_for(seed, "episode", t as u64);
            let classes: Vec<usize> = index::sample(&mut rng, eligible.len(), way)
                .into_iter()
                .map(|i| eligible[i])
                .collect();
            let mut support = Vec::with_capacity(way);
            let mut queries = Vec::with_capacity(way);
            for &c in &classes {
                let rows = &by_class[c];
                let drawn: Vec<usize> = index::sample(&mut rng, rows.len(), shot + query)
                    .into_iter()
                    .map(|i| rows[i])
                    .collect();
                support.push(drawn[..shot].to_vec());
                queries.push(drawn[shot..].to_vec());
            }
            Episode {
                classes,
                support,
                query: queries,
            }
        })
        .collect();
    Ok(episodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Episode seed; `None` for pooled reports.
    pub seed: Option<u64>,
    pub episodes: usize,
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub task_accuracies: Vec<f64>,
}

impl EvalReport {
    /// Mean and `1.96·s/√n` (sample standard deviation, n − 1 divisor).
    pub fn from_accuracies(label: impl Into<String>, seed: Option<u64>, task_accuracies: Vec<f64>) -> Self {
        let n = task_accuracies.len();
        let mean = if n == 0 {
            0.0
        } else {
            task_accuracies.iter().sum::<f64>() / n as f64
        };
        let ci95_halfwidth = if n < 2 {
            0.0
        } else {
            let var = task_accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        };
        EvalReport {
            label: label.into(),
            seed,
            episodes: n,
            mean,
            ci95_halfwidth,
            task_accuracies,
        }
    }

    /// All episodes from `reports` treated as one sample.
    pub fn pooled(reports: &[EvalReport]) -> Self {
        let all = reports.iter().flat_map(|r| r.task_accuracies.iter().copied()).collect();
        EvalReport::from_accuracies("pooled", None, all)
    }
}

/// Runs `features` (rows aligned with the archive) through `params` in chunks.
pub fn encode(params: &AdapterParams, features: &Array2<f64>) -> Result<Array2<f64>> {
    const CHUNK: usize = 4096;
    let mut out = Array2::zeros(features.raw_dim());
    for (i, chunk) in features.axis_chunks_iter(Axis(0), CHUNK).enumerate() {
        let (y, _) = adapter::forward(params, &chunk.to_owned())?;
        out.slice_mut(ndarray::s![i * CHUNK..i * CHUNK + y.nrows(), ..])
            .assign(&y);
    }
    Ok(out)
}

fn episode_accuracy(features: &Array2<f64>, episode: &Episode, metric: Metric) -> Result<f64> {
    let d = features.ncols();
    let mut protos = Array2::<f64>::zeros((episode.classes.len(), d));
    for (k, rows) in episode.support.iter().enumerate() {
        let mut acc = Array1::<f64>::zeros(d);
        for &r in rows {
            acc += &features.row(r);
        }
        acc /= rows.len() as f64;
        if metric == Metric::Cosine {
            let n = acc.dot(&acc).sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm { row: k });
            }
            acc /= n;
        }
        protos.row_mut(k).assign(&acc);
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for (label, rows) in episode.query.iter().enumerate() {
        for &r in rows {
            let q = features.row(r);
            let mut best = (0, f64::NEG_INFINITY);
            for (k, p) in protos.rows().into_iter().enumerate() {
                let score = match metric {
                    Metric::Cosine => {
                        let n = q.dot(&q).sqrt();
                        if n == 0.0 {
                            return Err(Error::ZeroNorm { row: r });
                        }
                        q.dot(&p) / n
                    }
                    Metric::Euclidean => -sq_dist(q, p),
                };
                if score > best.1 {
                    best = (k, score);
                }
            }
            total += 1;
            correct += usize::from(best.0 == label);
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Per-episode accuracies of nearest-prototype classification on
/// already-encoded features.
pub fn episode_accuracies(features: &Array2<f64>, episodes: &[Episode], metric: Metric) -> Result<Vec<f64>> {
    let n = features.nrows();
    for (t, ep) in episodes.iter().enumerate() {
        let valid = ep.support.len() == ep.classes.len()
            && ep.query.len() == ep.classes.len()
            && ep
                .support
                .iter()
                .chain(&ep.query)
                .all(|rows| !rows.is_empty() && rows.iter().all(|&r| r < n));
        if !valid {
            return Err(Error::Config(format!("episode {t} is malformed for {n} rows")));
        }
    }
    episodes
        .par_iter()
        .map(|ep| episode_accuracy(features, ep, metric))
        .collect()
}

/// Encodes the archive through `params`, then evaluates every episode.
pub fn prototypical_eval(
    params: &AdapterParams,
    images: &EmbeddingArchive,
    episodes: &[Episode],
    metric: Metric,
    seed: u64,
) -> Result<EvalReport> {
    if images.dim() != params.dim {
        return Err(Error::Shape(format!(
            "archive dim {} vs adapter dim {}",
            images.dim(),
            params.dim
        )));
    }
    let features = encode(params, &images.to_f64())?;
    let accs = episode_accuracies(&features, episodes, metric)?;
    Ok(EvalReport::from_accuracies(format!("seed-{seed}"), Some(seed), accs))
}

/// Mean `KL(P(x; f_t) ‖ P(x; f_0))` over rows of `features`.
pub fn mean_spurious_kl(
    params: &AdapterParams,
    frozen: &AdapterParams,
    features: &Array2<f64>,
    spurious_protos: &Array2<f64>,
) -> Result<f64> {
    Ok(spurious_kl_loss(&encode(params, features)?, &encode(frozen, features)?, spurious_protos)?.value)
}

/// Aligned text table, one line per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>8} {:>10} {:>10}", "report", "episodes", "mean", "ci95");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>10.4} {:>10.4}",
            r.label, r.episodes, r.mean, r.ci95_halfwidth
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ci_hand_case() {
        let r = EvalReport::from_accuracies("x", Some(0), vec![1.0, 0.0, 1.0, 1.0]);
        assert_eq!(r.mean, 0.75);
        assert!((r.ci95_halfwidth - 0.49).abs() < 1e-12);
    }

    #[test]
    fn pooled_concatenates() {
        let a = EvalReport::from_accuracies("a", Some(1), vec![1.0, 0.0]);
        let b = EvalReport::from_accuracies("b", Some(2), vec![1.0, 1.0]);
        let p = EvalReport::pooled(&[a, b]);
        assert_eq!(p.episodes, 4);
        assert_eq!(p.mean, 0.75);
        assert_eq!(p.seed, None);
    }

    #[test]
    fn zero_shot_self_match() {
        let protos = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let f = array![[0.0, 0.0, 1.0]];
        for t in [1.0, 0.01, 7.5] {
            assert_eq!(zero_shot_classify(&f, &protos, t).unwrap(), vec![2]);
        }
    }

    #[test]
    fn exact_match_episode_scores_one() {
        let feats = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let ep = Episode {
            classes: vec![0, 1],
            support: vec![vec![0], vec![1]],
            query: vec![vec![2], vec![3]],
        };
        for m in [Metric::Cosine, Metric::Euclidean] {
            assert_eq!(
                episode_accuracies(&feats, std::slice::from_ref(&ep), m).unwrap(),
                vec![1.0]
            );
        }
    }

    #[test]
    fn malformed_episode_rejected() {
        let feats = array![[1.0, 0.0]];
        let ep = Episode {
            classes: vec![0, 1],
            support: vec![vec![0], vec![5]],
            query: vec![vec![0], vec![0]],
        };
        assert!(episode_accuracies(&feats, &[ep], Metric::Cosine).is_err());
    }

    #[test]
    fn table_has_one_line_per_report() {
        let r = EvalReport::from_accuracies("seed-1", Some(1), vec![0.5]);
        assert_eq!(format_table(&[r.clone(), r]).lines().count(), 3);
    }
}
