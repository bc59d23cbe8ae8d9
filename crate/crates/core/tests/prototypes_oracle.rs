mod common;

use common::{class_prototype_oracle, max_abs_diff, random_grid, random_text_archive, spurious_prototype_oracle};
use fdalign::prototypes::{compute_class_prototypes, compute_spurious_prototypes, TextGrid};

#[test]
fn class_prototypes_match_scalar_loop() {
    for seed in 0..20 {
        let text = random_text_archive(seed, 7, 5, 6);
        for renorm in [false, true] {
            let got = compute_class_prototypes(&text, renorm).unwrap();
            let want = class_prototype_oracle(&text, renorm);
            assert!(max_abs_diff(&got, &want) < 1e-12, "seed {seed} renorm {renorm}");
        }
    }
}

#[test]
fn spurious_prototypes_match_scalar_loop() {
    for seed in 0..20 {
        let text = random_text_archive(seed + 100, 9, 4, 5);
        for renorm in [false, true] {
            let got = compute_spurious_prototypes(&text, renorm).unwrap();
            let want = spurious_prototype_oracle(&text, renorm);
            assert!(max_abs_diff(&got, &want) < 1e-12, "seed {seed} renorm {renorm}");
        }
    }
}

#[test]
fn transposing_the_grid_swaps_the_two_prototype_kinds() {
    for seed in 0..20 {
        let grid = TextGrid::from_array(random_grid(seed, 6, 3, 4));
        let t = grid.transposed();
        for renorm in [false, true] {
            let a = grid.class_prototypes(renorm).unwrap();
            let b = t.spurious_prototypes(renorm).unwrap();
            assert_eq!(a.dim(), b.dim());
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
            let c = grid.spurious_prototypes(renorm).unwrap();
            let d = t.class_prototypes(renorm).unwrap();
            assert!(c.iter().zip(&d).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
}

#[test]
fn row_order_does_not_change_prototypes() {
    let a = random_text_archive(3, 4, 3, 5);
    let grid = TextGrid::from_archive(&a).unwrap();
    let via_grid = grid.class_prototypes(false).unwrap();
    let direct = compute_class_prototypes(&a, false).unwrap();
    assert_eq!(via_grid, direct);
}
