use std::collections::BTreeSet;

use irda_core::stats::*;
use irda_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook Fleiss: counts n_ij per category, P_i, p_j.
fn fleiss_reference(rows: &[Vec<bool>]) -> f64 {
    let n = rows[0].len() as f64;
    let big_n = rows.len() as f64;
    let mut p_bar = 0.0;
    let mut totals = [0.0f64; 2];
    for row in rows {
        let ones = row.iter().filter(|x| **x).count() as f64;
        let counts = [n - ones, ones];
        p_bar += (counts.iter().map(|c| c * c).sum::<f64>() - n) / (n * (n - 1.0));
        totals[0] += counts[0];
        totals[1] += counts[1];
    }
    p_bar /= big_n;
    let p_e: f64 = totals.iter().map(|t| (t / (big_n * n)).powi(2)).sum();
    if p_e == 1.0 {
        1.0
    } else {
        (p_bar - p_e) / (1.0 - p_e)
    }
}

fn random_rows(rng: &mut ChaCha8Rng, items: usize, raters: usize) -> Vec<Vec<bool>> {
    (0..items)
        .map(|_| (0..raters).map(|_| rng.random_bool(0.4)).collect())
        .collect()
}

#[test]
fn fleiss_hand_cases() {
    let perfect = LabelMatrix::new(vec![vec![true; 4], vec![false; 4], vec![true; 4]]).unwrap();
    assert!((fleiss_kappa(&perfect) - 1.0).abs() < 1e-9);
    let split = LabelMatrix::new(vec![vec![true, true], vec![true, false]]).unwrap();
    assert!((fleiss_kappa(&split) + 1.0 / 3.0).abs() < 1e-9);
    assert!(matches!(LabelMatrix::new(vec![vec![true]]), Err(Error::Validation(_))));
}

#[test]
fn fleiss_matches_textbook_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let items = rng.random_range(1..40);
        let raters = rng.random_range(2..12);
        let rows = random_rows(&mut rng, items, raters);
        let m = LabelMatrix::new(rows.clone()).unwrap();
        assert!((fleiss_kappa(&m) - fleiss_reference(&rows)).abs() < 1e-9);
    }
}

#[test]
fn jaccard_enumerated() {
    let s = |xs: &[&'static str]| xs.iter().copied().collect::<BTreeSet<_>>();
    assert!((jaccard(&s(&["a", "b"]), &s(&["b", "c"])) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(jaccard(&s(&["a"]), &s(&["a"])), 1.0);
    assert_eq!(jaccard(&s(&["a"]), &s(&["b"])), 0.0);
    assert_eq!(jaccard::<&str>(&s(&[]), &s(&[])), 1.0);
    // pairs: {a,b}-{b,c} 1/3, {a,b}-{a,b,c} 2/3, {b,c}-{a,b,c} 2/3
    let sets = [s(&["a", "b"]), s(&["b", "c"]), s(&["a", "b", "c"])];
    assert!((mean_pairwise_jaccard(&sets).unwrap() - 5.0 / 9.0).abs() < 1e-15);
    assert!(mean_pairwise_jaccard(&sets[..1]).is_err());
}

/// Exact two-sided p by listing all 2^n sign patterns.
fn enumerate_p(diffs: &[f64]) -> f64 {
    let mut abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let rank = |x: f64| {
        let lo = abs.iter().position(|a| *a == x).unwrap();
        let hi = abs.iter().rposition(|a| *a == x).unwrap();
        (lo + hi) as f64 / 2.0 + 1.0
    };
    let ranks: Vec<f64> = diffs.iter().map(|d| rank(d.abs())).collect();
    let total: f64 = ranks.iter().sum();
    let observed: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let dev = (observed - total / 2.0).abs();
    let n = diffs.len();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (w - total / 2.0).abs() >= dev - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

#[test]
fn wilcoxon_exact_cases() {
    let w = wilcoxon_signed_rank(&[(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]).unwrap();
    assert_eq!(w.w_minus, 0.0);
    assert_eq!(w.method, WilcoxonMethod::Exact);
    assert!((w.p_value - 0.25).abs() < 1e-12);
    let sym = wilcoxon_signed_rank(&[(1.0, 0.0), (0.0, 1.0)]).unwrap();
    assert!((sym.p_value - 1.0).abs() < 1e-12);
    assert!(matches!(
        wilcoxon_signed_rank(&[(1.0, 1.0), (2.0, 2.0)]),
        Err(Error::NoSignal)
    ));
}

#[test]
fn wilcoxon_exact_matches_sign_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(1..=12);
        // small integers so ties and zeros occur
        let diffs: Vec<f64> = (0..n).map(|_| rng.random_range(-4..=4) as f64).collect();
        let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
        if nonzero.is_empty() {
            continue;
        }
        let w = wilcoxon_exact(&diffs).unwrap();
        assert!((w.p_value - enumerate_p(&nonzero)).abs() < 1e-12, "{diffs:?}");
    }
}

#[test]
fn exact_and_normal_agree_at_boundary() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let pairs: Vec<(f64, f64)> = (0..WILCOXON_EXACT_MAX)
            .map(|_| (rng.random::<f64>() + 0.2, rng.random::<f64>()))
            .collect();
        let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
        let exact = wilcoxon_exact(&diffs).unwrap().p_value;
        let normal = wilcoxon_normal(&diffs).unwrap().p_value;
        worst = worst.max((exact - normal).abs());
    }
    assert!(worst < 0.02, "max |exact - normal| = {worst}");
}

#[test]
fn bootstrap_degenerate_and_contains_mean() {
    let ci = bootstrap_ci(&[2.5; 7], 10_000, 0.95, 1).unwrap();
    assert_eq!((ci.low, ci.high, ci.mean), (2.5, 2.5, 2.5));
    let values = [1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
    let ci = bootstrap_ci(&values, 10_000, 0.95, 2).unwrap();
    assert!(ci.low <= ci.mean && ci.mean <= ci.high);
    assert_eq!(ci, bootstrap_ci(&values, 10_000, 0.95, 2).unwrap());
    assert!(bootstrap_ci(&[], 10, 0.95, 0).is_err());
}

/// Box-Muller standard normal draws.
fn normal_sample(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

#[test]
fn bootstrap_coverage_near_nominal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 500;
    let covered = (0..trials)
        .filter(|&t| {
            let sample = normal_sample(&mut rng, 100);
            let ci = bootstrap_ci(&sample, 2_000, 0.95, t as u64).unwrap();
            ci.low <= 0.0 && 0.0 <= ci.high
        })
        .count();
    let rate = covered as f64 / trials as f64;
    assert!((0.92..=0.98).contains(&rate), "coverage {rate}");
}

#[test]
fn paired_comparison_reports_all_parts() {
    let a = [0.9, 0.8, 0.95, 0.7];
    let b = [0.6, 0.8, 0.5, 0.65];
    let c = paired_comparison(&a, &b, 1000, 3).unwrap();
    assert!((c.mean_delta - 0.2).abs() < 1e-12);
    assert_eq!(c.wilcoxon.unwrap().n, 3);
    assert!(paired_comparison(&a, &a, 1000, 3).unwrap().wilcoxon.is_none());
}

proptest! {
    #[test]
    fn fleiss_permutation_invariant(seed in 0u64..1000, items in 1usize..15, raters in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, items, raters);
        let base = fleiss_kappa(&LabelMatrix::new(rows.clone()).unwrap());
        let mut permuted: Vec<Vec<bool>> = rows.iter().rev().cloned().collect();
        for row in &mut permuted {
            row.rotate_left(1);
        }
        let k = fleiss_kappa(&LabelMatrix::new(permuted).unwrap());
        prop_assert!((base - k).abs() < 1e-12);
        prop_assert!(base <= 1.0 + 1e-12 && !base.is_nan());
    }

    #[test]
    fn jaccard_symmetric_and_bounded(a in prop::collection::btree_set(0u8..12, 0..8),
                                     b in prop::collection::btree_set(0u8..12, 0..8)) {
        let ab = jaccard(&a, &b);
        prop_assert_eq!(ab, jaccard(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        if !(a.is_empty() && b.is_empty()) {
            prop_assert_eq!(ab == 1.0, a == b);
        }
    }

    #[test]
    fn wilcoxon_scale_invariant(diffs in prop::collection::vec(-50i32..50, 1..25), scale in 0.01f64..100.0) {
        let d: Vec<f64> = diffs.iter().map(|&x| x as f64).collect();
        prop_assume!(d.iter().any(|x| *x != 0.0));
        let pairs: Vec<(f64, f64)> = d.iter().map(|x| (*x, 0.0)).collect();
        let scaled: Vec<(f64, f64)> = d.iter().map(|x| (x * scale, 0.0)).collect();
        let p = wilcoxon_signed_rank(&pairs).unwrap().p_value;
        let q = wilcoxon_signed_rank(&scaled).unwrap().p_value;
        prop_assert!((p - q).abs() < 1e-12);
    }
}
