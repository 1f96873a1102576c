use std::collections::HashMap;

use gzsl_core::autodiff::Tensor;
use gzsl_core::eval::{ausuc, curve_area, default_grid, h_mean, per_class_top1, shifted_argmax, TestScores};
use gzsl_core::gate::{ClassDomains, DomainLabel};
use proptest::prelude::*;

/// Independent per-class accuracy: group hits by label with a hash map.
fn oracle_per_class(preds: &[usize], labels: &[usize], classes: &[usize]) -> f64 {
    let mut by: HashMap<usize, (f64, f64)> = HashMap::new();
    for (p, y) in preds.iter().zip(labels) {
        if classes.contains(y) {
            let e = by.entry(*y).or_default();
            e.1 += 1.0;
            if p == y {
                e.0 += 1.0;
            }
        }
    }
    if by.is_empty() {
        return 0.0;
    }
    by.values().map(|(h, n)| h / n).sum::<f64>() / by.len() as f64
}

#[test]
fn h_mean_reference_rows() {
    // 52.4 / 52.9 and 57.7 / 43.7 seen/unseen accuracies round to 52.6 and 49.7.
    // 2·0.524·0.529 / 1.053 = 0.554392 / 1.053; 2·0.577·0.437 / 1.014 = 0.504298 / 1.014
    let a = h_mean(0.524, 0.529);
    let b = h_mean(0.577, 0.437);
    assert!((a - 0.526_488).abs() < 1e-6, "{a}");
    assert!((b - 0.497_335).abs() < 1e-6, "{b}");
    assert_eq!((a * 1000.0).round() / 10.0, 52.6);
    assert_eq!((b * 1000.0).round() / 10.0, 49.7);
}

#[test]
fn per_class_mean_differs_from_sample_mean() {
    let labels = [0, 0, 0, 0, 1];
    let preds = [0, 0, 0, 0, 0];
    assert_eq!(per_class_top1(&preds, &labels, &[0, 1]), 0.5);
}

fn two_domain_scores() -> (TestScores, ClassDomains) {
    // classes 0, 1 seen; 2 unseen
    let domains = ClassDomains::new(vec![DomainLabel::Seen, DomainLabel::Seen, DomainLabel::Unseen]);
    let seen_scores = Tensor::from_rows(&[vec![0.6, 0.1, 0.3], vec![0.2, 0.5, 0.3], vec![0.4, 0.2, 0.45]]).unwrap();
    let unseen_scores = Tensor::from_rows(&[vec![0.5, 0.1, 0.4], vec![0.1, 0.2, 0.7]]).unwrap();
    let scores = TestScores { seen_scores, seen_labels: vec![0, 1, 0], unseen_scores, unseen_labels: vec![2, 2] };
    (scores, domains)
}

#[test]
fn curve_endpoints_restrict_to_one_domain() {
    let (scores, domains) = two_domain_scores();
    let (area, curve) = ausuc(&scores, &domains, &default_grid(scores.max_abs(), 21));
    let first = curve.first().unwrap();
    let last = curve.last().unwrap();
    assert_eq!(first.lambda, f64::NEG_INFINITY);
    assert_eq!((first.acc_seen, first.acc_unseen), (1.0, 0.0));
    assert_eq!(last.lambda, f64::INFINITY);
    assert_eq!((last.acc_seen, last.acc_unseen), (0.0, 1.0));
    // λ = 0: seen class 0 gets 1 of 2, class 1 gets 1 of 1; unseen 1 of 2
    let zero = curve.iter().find(|p| p.lambda == 0.0).unwrap();
    assert_eq!((zero.acc_seen, zero.acc_unseen), (0.75, 0.5));
    assert!(area > 0.0 && area <= 1.0);
}

fn score_rows(rows: usize, classes: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0f64..1.0, classes), rows)
}

proptest! {
    #[test]
    fn h_mean_is_between_min_and_geometric_mean(a in 1e-6f64..=1.0, b in 1e-6f64..=1.0) {
        let h = h_mean(a, b);
        let tol = 1e-12;
        prop_assert!(a.min(b) - tol <= h);
        prop_assert!(h <= (a * b).sqrt() + tol);
        prop_assert!((a * b).sqrt() <= a.max(b) + tol);
    }

    #[test]
    fn per_class_matches_oracle_and_ignores_order_and_duplication(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60),
        dup in 1usize..4,
        rotate in 0usize..60,
    ) {
        let classes = [0, 1, 2, 3];
        let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let base = per_class_top1(&preds, &labels, &classes);
        prop_assert!((base - oracle_per_class(&preds, &labels, &classes)).abs() < 1e-12);

        let k = rotate % pairs.len();
        let (mut p2, mut l2) = (preds.clone(), labels.clone());
        p2.rotate_left(k);
        l2.rotate_left(k);
        prop_assert!((per_class_top1(&p2, &l2, &classes) - base).abs() < 1e-12);

        // repeat every sample of class 0 `dup` times
        let (mut p3, mut l3) = (preds.clone(), labels.clone());
        for (p, y) in preds.iter().zip(&labels) {
            if *y == 0 {
                for _ in 1..dup {
                    p3.push(*p);
                    l3.push(*y);
                }
            }
        }
        prop_assert!((per_class_top1(&p3, &l3, &classes) - base).abs() < 1e-12);
    }

    #[test]
    fn ausuc_properties(
        seen in score_rows(6, 4),
        unseen in score_rows(5, 4),
        seen_labels in prop::collection::vec(0usize..2, 6),
        unseen_labels in prop::collection::vec(2usize..4, 5),
        n in 2usize..40,
        seed in 0u64..1000,
    ) {
        let domains = ClassDomains::new(vec![DomainLabel::Seen, DomainLabel::Seen, DomainLabel::Unseen, DomainLabel::Unseen]);
        let scores = TestScores {
            seen_scores: Tensor::from_rows(&seen).unwrap(),
            seen_labels,
            unseen_scores: Tensor::from_rows(&unseen).unwrap(),
            unseen_labels,
        };
        let grid = default_grid(scores.max_abs(), n);
        let (area, curve) = ausuc(&scores, &domains, &grid);

        // reordering the grid changes nothing
        let mut shuffled = grid.clone();
        let k = (seed as usize) % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (area2, curve2) = ausuc(&scores, &domains, &shuffled);
        prop_assert_eq!(area, area2);
        prop_assert_eq!(curve, curve2.clone());

        // bounded by the best seen and best unseen accuracy along the curve
        let ms = curve2.iter().map(|p| p.acc_seen).fold(0.0, f64::max);
        let mu = curve2.iter().map(|p| p.acc_unseen).fold(0.0, f64::max);
        prop_assert!(area <= ms * mu + 1e-12);
        prop_assert!(ms * mu <= 1.0);

        // refining the grid keeps every recorded extreme
        let fine = default_grid(scores.max_abs(), 2 * n + 1);
        let (_, fine_curve) = ausuc(&scores, &domains, &[grid.clone(), fine].concat());
        let fs = fine_curve.iter().map(|p| p.acc_seen).fold(0.0, f64::max);
        let fu = fine_curve.iter().map(|p| p.acc_unseen).fold(0.0, f64::max);
        prop_assert!(fs >= ms && fu >= mu);
    }

    #[test]
    fn shifted_argmax_matches_brute_force(row in prop::collection::vec(-2.0f64..2.0, 5), lambda in -3.0f64..3.0) {
        let domains = ClassDomains::new(vec![
            DomainLabel::Seen, DomainLabel::Unseen, DomainLabel::Seen, DomainLabel::Unseen, DomainLabel::Seen,
        ]);
        let shifted: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(y, s)| if domains.get(y) == Some(DomainLabel::Seen) { s - lambda } else { *s })
            .collect();
        let best = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let expect = shifted.iter().position(|&v| v == best).unwrap();
        prop_assert_eq!(shifted_argmax(&row, &domains, lambda), expect);
    }
}

#[test]
fn hand_made_curve_area() {
    assert_eq!(curve_area(&[(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)]), 0.5);
}
