mod common;

use common::{brute_force_accuracy, brute_force_ari};
use rand::Rng;
use secu_core::metrics::{accuracy, ari, nmi, size_stats};
use secu_core::numerics::rng;

#[test]
fn accuracy_matches_enumeration_on_five_clusters() {
    let mut r = rng::seeded(1);
    for _ in 0..100 {
        let n = r.random_range(5..40);
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..5)).collect();
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..5)).collect();
        assert!(
            (accuracy(&pred, &truth).unwrap() - brute_force_accuracy(&pred, &truth)).abs() < 1e-15
        );
    }
}

#[test]
fn accuracy_is_invariant_to_relabeling() {
    let mut r = rng::seeded(2);
    let pred: Vec<usize> = (0..60).map(|_| r.random_range(0..6)).collect();
    let truth: Vec<usize> = (0..60).map(|_| r.random_range(0..4)).collect();
    let perm = rng::permutation(&mut r, 6);
    let relabeled: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
    assert_eq!(
        accuracy(&pred, &truth).unwrap(),
        accuracy(&relabeled, &truth).unwrap()
    );
}

#[test]
fn ari_matches_pair_counting_on_eight_points() {
    let mut r = rng::seeded(3);
    for _ in 0..200 {
        let a: Vec<usize> = (0..8).map(|_| r.random_range(0..3)).collect();
        let b: Vec<usize> = (0..8).map(|_| r.random_range(0..4)).collect();
        assert!((ari(&a, &b).unwrap() - brute_force_ari(&a, &b)).abs() < 1e-12);
    }
    assert_eq!(ari(&[0; 8], &[0, 0, 1, 1, 2, 2, 3, 3]).unwrap(), 0.0);
}

#[test]
fn nmi_direct_formula_and_identity() {
    let a = [0, 0, 1, 1, 2, 2, 2, 0];
    assert!((nmi(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    assert_eq!(nmi(&[3; 8], &a).unwrap(), 0.0);
}

#[test]
fn size_stats_match_recount() {
    let mut r = rng::seeded(4);
    for _ in 0..50 {
        let k = r.random_range(1..8);
        let pred: Vec<usize> = (0..30).map(|_| r.random_range(0..k)).collect();
        let counts: Vec<usize> = (0..k)
            .map(|j| pred.iter().filter(|&&p| p == j).count())
            .collect();
        let expect = (*counts.iter().max().unwrap(), *counts.iter().min().unwrap());
        assert_eq!(size_stats(&pred, k).unwrap(), expect);
    }
    assert_eq!(size_stats(&[0; 12], 4).unwrap(), (12, 0));
    assert_eq!(size_stats(&[0, 1, 2, 3], 4).unwrap(), (1, 1));
}
