//! Helpers and independent oracles shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use fdalign::embed_store::EmbeddingArchive;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

pub fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    m
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// A complete (template × class) text archive with uniform random rows,
/// stored in shuffled row order.
pub fn random_text_archive(seed: u64, templates: usize, classes: usize, dim: usize) -> EmbeddingArchive {
    let mut r = rng(seed);
    let mut pairs: Vec<(u32, u32)> = (0..templates as u32)
        .flat_map(|t| (0..classes as u32).map(move |c| (t, c)))
        .collect();
    for i in (1..pairs.len()).rev() {
        let j = r.random_range(0..=i);
        pairs.swap(i, j);
    }
    let vectors = Array2::from_shape_simple_fn((pairs.len(), dim), || r.random_range(-1.0f32..1.0));
    EmbeddingArchive::text(
        (0..classes).map(|c| format!("class{c}")).collect(),
        (0..templates).map(|t| format!("template {t} of {{}}")).collect(),
        vectors,
        pairs.iter().map(|p| p.1).collect(),
        pairs.iter().map(|p| p.0).collect(),
    )
    .expect("valid text archive")
}

/// Scalar-loop class prototypes: for each class, sum its rows in archive
/// order and divide by the template count.
pub fn class_prototype_oracle(text: &EmbeddingArchive, renormalize: bool) -> Vec<Vec<f64>> {
    let (c, d, m) = (text.classes().len(), text.dim(), text.templates().len());
    let mut out = vec![vec![0.0; d]; c];
    for row in 0..text.len() {
        let y = text.class_ids()[row] as usize;
        for j in 0..d {
            out[y][j] += f64::from(text.vectors()[[row, j]]);
        }
    }
    finish_means(out, m, renormalize)
}

/// Scalar-loop spurious prototypes: per template, the mean over classes.
pub fn spurious_prototype_oracle(text: &EmbeddingArchive, renormalize: bool) -> Vec<Vec<f64>> {
    let (c, d, m) = (text.classes().len(), text.dim(), text.templates().len());
    let tids = text.template_ids().expect("text archive");
    let mut out = vec![vec![0.0; d]; m];
    for row in 0..text.len() {
        let t = tids[row] as usize;
        for j in 0..d {
            out[t][j] += f64::from(text.vectors()[[row, j]]);
        }
    }
    finish_means(out, c, renormalize)
}

fn finish_means(mut sums: Vec<Vec<f64>>, count: usize, renormalize: bool) -> Vec<Vec<f64>> {
    for v in &mut sums {
        for x in v.iter_mut() {
            *x /= count as f64;
        }
        if renormalize {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in v.iter_mut() {
                *x /= n;
            }
        }
    }
    sums
}

pub fn max_abs_diff(a: &Array2<f64>, b: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((a[[i, j]] - v).abs());
        }
    }
    worst
}

/// A random `M × C × D` grid for duality checks.
pub fn random_grid(seed: u64, m: usize, c: usize, d: usize) -> Array3<f64> {
    let mut r = rng(seed);
    Array3::from_shape_simple_fn((m, c, d), || r.random_range(-1.0..1.0))
}

/// `count` unit vectors clustered around a few shared directions, with one
/// row (`outlier`) placed far from all of them. Returns the points and the
/// outlier row.
pub fn prototypes_with_outlier(seed: u64, count: usize, dim: usize) -> (Array2<f64>, usize) {
    let mut r = rng(seed);
    let centers = unit_rows(uniform(&mut r, 4, dim));
    let mut points = Array2::zeros((count, dim));
    for i in 0..count {
        let base = centers.row(i % 4);
        for j in 0..dim {
            points[[i, j]] = base[j] + 0.1 * r.random_range(-1.0..1.0);
        }
    }
    let outlier = r.random_range(0..count);
    let far = centers.sum_axis(ndarray::Axis(0)) * -10.0;
    for j in 0..dim {
        points[[outlier, j]] = far[j] + r.random_range(-1.0..1.0);
    }
    (points, outlier)
}

/// The row with the largest summed Euclidean distance to all others.
pub fn distance_rank_outlier(points: &Array2<f64>) -> usize {
    let n = points.nrows();
    let total = |i: usize| -> f64 {
        (0..n)
            .map(|k| {
                let d = &points.row(i) - &points.row(k);
                d.dot(&d).sqrt()
            })
            .sum()
    };
    (0..n).max_by(|&a, &b| total(a).total_cmp(&total(b))).expect("nonempty")
}

/// Smallest WCSS over every split of the rows into two nonempty groups.
pub fn best_two_partition_wcss(points: &Array2<f64>) -> f64 {
    let n = points.nrows();
    let d = points.ncols();
    let mut best = f64::INFINITY;
    // Row 0 always sits in group A, so each split is visited once.
    for mask in 0u32..(1 << (n - 1)) {
        let in_b = |i: usize| i > 0 && mask & (1 << (i - 1)) != 0;
        let groups: [Vec<usize>; 2] = [
            (0..n).filter(|&i| !in_b(i)).collect(),
            (0..n).filter(|&i| in_b(i)).collect(),
        ];
        if groups[1].is_empty() {
            continue;
        }
        let mut total = 0.0;
        for g in &groups {
            let mut mean = vec![0.0; d];
            for &i in g {
                for j in 0..d {
                    mean[j] += points[[i, j]];
                }
            }
            for v in &mut mean {
                *v /= g.len() as f64;
            }
            for &i in g {
                for j in 0..d {
                    total += (points[[i, j]] - mean[j]).powi(2);
                }
            }
        }
        best = best.min(total);
    }
    best
}

/// Six points in two well-separated groups of three.
pub fn two_group_points(seed: u64, dim: usize) -> Array2<f64> {
    let mut r = rng(seed);
    let a: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = a.iter().map(|v| v + 5.0).collect();
    Array2::from_shape_fn((6, dim), |(i, j)| {
        let center = if i < 3 { a[j] } else { b[j] };
        center + 0.3 * r.random_range(-1.0..1.0)
    })
}

pub mod gradcheck {
    use fdalign::adapter::{self, AdapterParams, Architecture};
    use fdalign::losses;
    use ndarray::Array2;
    use rand::Rng;

    use super::{numeric_grad, relative_error, rng, uniform, unit_rows};

    pub const STEP: f64 = 1e-4;

    /// Adapter backward against finite differences of `Σ G ∘ forward(x)`.
    pub fn adapter_instance(seed: u64) -> f64 {
        let mut r = rng(seed);
        let dim = r.random_range(2..=8);
        let batch = r.random_range(1..=4);
        let architecture = if seed.is_multiple_of(2) {
            Architecture::Linear
        } else {
            Architecture::Mlp {
                hidden: r.random_range(2..=6),
            }
        };
        let residual = r.random_range(0.0..0.9);
        let base = AdapterParams::init(architecture, dim, residual, seed).unwrap();
        let perturbed: Vec<f64> = base
            .flatten()
            .iter()
            .map(|v| v + 0.3 * r.random_range(-1.0..1.0))
            .collect();
        let params = base.with_flat(&perturbed).unwrap();
        let x = uniform(&mut r, batch, dim);
        let g = uniform(&mut r, batch, dim);

        let (_, tape) = adapter::forward(&params, &x).unwrap();
        let analytic = adapter::backward(&params, &tape, &g).unwrap().flatten();
        let numeric = numeric_grad(&params.flatten(), STEP, |flat| {
            let p = params.with_flat(flat).unwrap();
            let (y, _) = adapter::forward(&p, &x).unwrap();
            (&y * &g).sum()
        });
        relative_error(&analytic, &numeric)
    }

    pub fn class_loss_instance(seed: u64) -> f64 {
        let mut r = rng(seed);
        let dim = r.random_range(2..=8);
        let batch = r.random_range(1..=4);
        let classes = r.random_range(2..=5);
        let temperature = [1.0, 0.5, 0.1][r.random_range(0..3)];
        let protos = unit_rows(uniform(&mut r, classes, dim));
        let f = unit_rows(uniform(&mut r, batch, dim));
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();

        let analytic = losses::class_loss(&f, &labels, &protos, temperature).unwrap().grad;
        let flat: Vec<f64> = f.iter().copied().collect();
        let numeric = numeric_grad(&flat, STEP, |v| {
            let probe = Array2::from_shape_vec((batch, dim), v.to_vec()).unwrap();
            losses::class_loss(&probe, &labels, &protos, temperature).unwrap().value
        });
        relative_error(&analytic.iter().copied().collect::<Vec<_>>(), &numeric)
    }

    pub fn spurious_kl_instance(seed: u64) -> f64 {
        let mut r = rng(seed);
        let dim = r.random_range(2..=8);
        let batch = r.random_range(1..=4);
        let m = r.random_range(2..=6);
        let s = unit_rows(uniform(&mut r, m, dim)) * 2.0;
        let f0 = unit_rows(uniform(&mut r, batch, dim));
        let ft = unit_rows(uniform(&mut r, batch, dim));

        let analytic = losses::spurious_kl_loss(&ft, &f0, &s).unwrap().grad;
        let flat: Vec<f64> = ft.iter().copied().collect();
        let numeric = numeric_grad(&flat, STEP, |v| {
            let probe = Array2::from_shape_vec((batch, dim), v.to_vec()).unwrap();
            losses::spurious_kl_loss(&probe, &f0, &s).unwrap().value
        });
        relative_error(&analytic.iter().copied().collect::<Vec<_>>(), &numeric)
    }
}
