mod common;

use common::{
    best_two_partition_wcss, distance_rank_outlier, prototypes_with_outlier, two_group_points, uniform, unit_rows,
};
use fdalign::spc::{average_path_length, filter_outliers, isolation_forest_scores, kmeans_merge, run_spc, SpcConfig};
use ndarray::Array2;

#[test]
fn path_length_normalizer_values() {
    assert_eq!(average_path_length(0), 0.0);
    assert_eq!(average_path_length(1), 0.0);
    assert_eq!(average_path_length(2), 1.0);
    let euler = 0.577_215_664_901_532_9_f64;
    let want = 2.0 * ((255.0f64).ln() + euler) - 2.0 * 255.0 / 256.0;
    assert!((average_path_length(256) - want).abs() < 1e-12);
}

#[test]
fn injected_outlier_is_dropped() {
    let mut excluded = 0;
    for seed in 0..100 {
        let (points, outlier) = prototypes_with_outlier(seed, 80, 8);
        assert_eq!(
            distance_rank_outlier(&points),
            outlier,
            "oracle disagrees at seed {seed}"
        );
        let kept = filter_outliers(&points, &SpcConfig::new(60, 20, seed)).unwrap();
        if !kept.kept_indices.contains(&outlier) {
            excluded += 1;
        }
    }
    assert!(excluded >= 95, "outlier excluded in {excluded}/100 seeds");
}

#[test]
fn mirrored_points_score_alike() {
    // Scores are invariant in distribution under x -> -x; averaged over
    // forests, a point and its mirror image should score about the same.
    let base = Array2::from_shape_vec((5, 2), vec![0.0, 0.0, 1.0, 0.5, -1.0, -0.5, 3.0, 3.0, -3.0, -3.0]).unwrap();
    let mut diff = 0.0;
    for seed in 0..50 {
        let s = isolation_forest_scores(
            &base,
            &SpcConfig {
                seed,
                ..SpcConfig::new(5, 2, seed)
            },
        )
        .unwrap();
        diff += s[3] - s[4];
    }
    assert!((diff / 50.0).abs() < 0.05, "mean mirror gap {}", diff / 50.0);
}

#[test]
fn scores_are_deterministic_and_in_unit_interval() {
    let (points, _) = prototypes_with_outlier(7, 40, 6);
    let cfg = SpcConfig::new(30, 10, 7);
    let a = isolation_forest_scores(&points, &cfg).unwrap();
    let b = isolation_forest_scores(&points, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|&s| s > 0.0 && s <= 1.0));
}

#[test]
fn kmeans_finds_the_best_two_partition() {
    for seed in 0..30 {
        let points = two_group_points(seed, 3);
        let cfg = SpcConfig {
            renormalize: false,
            ..SpcConfig::new(6, 2, seed)
        };
        let result = kmeans_merge(&points, &cfg).unwrap();
        let best = best_two_partition_wcss(&points);
        assert!(
            (result.wcss - best).abs() < 1e-9,
            "seed {seed}: {} vs {best}",
            result.wcss
        );
    }
}

#[test]
fn wcss_never_increases() {
    for seed in 0..20 {
        let mut r = common::rng(seed);
        let points = uniform(&mut r, 50, 4);
        let cfg = SpcConfig {
            renormalize: false,
            ..SpcConfig::new(50, 7, seed)
        };
        let result = kmeans_merge(&points, &cfg).unwrap();
        for w in result.wcss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {:?}", result.wcss_history);
        }
    }
}

#[test]
fn correction_yields_k_prototypes() {
    let mut r = common::rng(1);
    let protos = unit_rows(uniform(&mut r, 80, 16));
    let (corrected, report) = run_spc(&protos, &SpcConfig::new(60, 20, 3)).unwrap();
    assert_eq!(corrected.dim(), (20, 16));
    assert_eq!(report.kept_indices.len(), 60);
    assert_eq!(report.cluster_assignment.len(), 60);
    assert_eq!(report.outlier_scores.len(), 80);
    for row in corrected.rows() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bad_configs_are_rejected() {
    let mut r = common::rng(2);
    let protos = uniform(&mut r, 10, 3);
    for (n, k) in [(11, 2), (5, 6), (5, 1)] {
        assert!(run_spc(&protos, &SpcConfig::new(n, k, 0)).is_err(), "n={n} k={k}");
    }
}
