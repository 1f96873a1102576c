//! Per-class top-1 accuracy, harmonic mean and the seen/unseen trade-off
//! curve obtained by penalising seen-class scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::gate::{ClassDomains, DomainLabel};

/// Mean over classes in `class_set` of that class's hit rate. Classes with
/// no samples are left out of the mean (with a warning); if none has a
/// sample the result is 0.
pub fn per_class_top1(preds: &[usize], labels: &[usize], class_set: &[usize]) -> f64 {
    assert_eq!(preds.len(), labels.len(), "one prediction per label");
    let mut tally: BTreeMap<usize, (usize, usize)> = class_set.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &y) in preds.iter().zip(labels) {
        if let Some(t) = tally.get_mut(&y) {
            t.1 += 1;
            if p == y {
                t.0 += 1;
            }
        }
    }
    let empty: Vec<usize> = tally.iter().filter(|(_, t)| t.1 == 0).map(|(&c, _)| c).collect();
    if !empty.is_empty() {
        log::warn!("classes without test samples left out of the per-class mean: {empty:?}");
    }
    let rates: Vec<f64> = tally.values().filter(|t| t.1 > 0).map(|&(hit, n)| hit as f64 / n as f64).collect();
    if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

pub fn h_mean(acc_seen: f64, acc_unseen: f64) -> f64 {
    let s = acc_seen + acc_unseen;
    if s == 0.0 {
        0.0
    } else {
        2.0 * acc_seen * acc_unseen / s
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax of `score(y) − λ·[y seen]`. `λ = +∞` restricts to unseen classes
/// and `λ = −∞` to seen classes.
pub fn shifted_argmax(row: &[f64], domains: &ClassDomains, lambda: f64) -> usize {
    let only = if lambda == f64::INFINITY {
        Some(DomainLabel::Unseen)
    } else if lambda == f64::NEG_INFINITY {
        Some(DomainLabel::Seen)
    } else {
        None
    };
    let mut best: Option<(usize, f64)> = None;
    for (y, &s) in row.iter().enumerate() {
        let d = domains.get(y).expect("score row longer than class domains");
        let v = match only {
            Some(keep) if d != keep => continue,
            Some(_) => s,
            None if d == DomainLabel::Seen => s - lambda,
            None => s,
        };
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((y, v));
        }
    }
    best.map_or(0, |(y, _)| y)
}

/// Scores of the seen and unseen test samples over the full label space.
#[derive(Debug, Clone, PartialEq)]
pub struct TestScores {
    pub seen_scores: Tensor,
    pub seen_labels: Vec<usize>,
    pub unseen_scores: Tensor,
    pub unseen_labels: Vec<usize>,
}

impl TestScores {
    pub fn max_abs(&self) -> f64 {
        self.seen_scores.max_abs().max(self.unseen_scores.max_abs())
    }

    /// `(acc_seen, acc_unseen)` with seen scores shifted by `lambda`.
    pub fn accuracies(&self, domains: &ClassDomains, lambda: f64) -> (f64, f64) {
        let predict = |t: &Tensor| (0..t.rows()).map(|i| shifted_argmax(t.row(i), domains, lambda)).collect::<Vec<_>>();
        let seen = domains.classes_in(DomainLabel::Seen);
        let unseen = domains.classes_in(DomainLabel::Unseen);
        (
            per_class_top1(&predict(&self.seen_scores), &self.seen_labels, &seen),
            per_class_top1(&predict(&self.unseen_scores), &self.unseen_labels, &unseen),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(with = "lambda_text")]
    pub lambda: f64,
    pub acc_seen: f64,
    pub acc_unseen: f64,
}

/// JSON numbers cannot hold infinities; those become `"inf"` / `"-inf"`.
mod lambda_text {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(D::Error::custom(format!("bad lambda {t:?}"))),
        }
    }
}

/// `n` evenly spaced shifts over `[−m, m]` that always contain 0 exactly.
pub fn default_grid(max_abs_score: f64, n: usize) -> Vec<f64> {
    let m = if max_abs_score > 0.0 { max_abs_score } else { 1.0 };
    let mut grid: Vec<f64> = match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| -m + 2.0 * m * i as f64 / (n - 1) as f64).collect(),
    };
    if n > 1 && n % 2 == 1 {
        grid[n / 2] = 0.0;
    } else if n > 1 {
        grid.push(0.0);
    }
    grid
}

/// Trapezoid area under the points, ordered by ascending seen accuracy
/// (ties by descending unseen accuracy).
pub fn curve_area(points: &[(f64, f64)]) -> f64 {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    p.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Curve over `grid` plus the `±∞` endpoints, and its area.
pub fn ausuc(scores: &TestScores, domains: &ClassDomains, grid: &[f64]) -> (f64, Vec<CurvePoint>) {
    let mut lambdas: Vec<f64> = grid.iter().copied().filter(|v| !v.is_nan()).collect();
    lambdas.push(f64::NEG_INFINITY);
    lambdas.push(f64::INFINITY);
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let curve: Vec<CurvePoint> = lambdas
        .into_iter()
        .map(|lambda| {
            let (acc_seen, acc_unseen) = scores.accuracies(domains, lambda);
            CurvePoint { lambda, acc_seen, acc_unseen }
        })
        .collect();
    let area = curve_area(&curve.iter().map(|p| (p.acc_seen, p.acc_unseen)).collect::<Vec<_>>());
    (area, curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub acc_seen: f64,
    pub acc_unseen: f64,
    pub h_mean: f64,
    pub ausuc: f64,
    pub curve: Vec<CurvePoint>,
}

impl EvalReport {
    pub fn from_scores(mode: &str, scores: &TestScores, domains: &ClassDomains, grid: &[f64]) -> Self {
        let (acc_seen, acc_unseen) = scores.accuracies(domains, 0.0);
        let (ausuc, curve) = ausuc(scores, domains, grid);
        EvalReport { mode: mode.to_string(), acc_seen, acc_unseen, h_mean: h_mean(acc_seen, acc_unseen), ausuc, curve }
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("lambda,acc_seen,acc_unseen\n");
        for p in &self.curve {
            let _ = writeln!(out, "{},{},{}", p.lambda, p.acc_seen, p.acc_unseen);
        }
        out
    }

    pub fn table_header() -> &'static str {
        "mode           acc_seen  acc_unseen  h_mean   ausuc"
    }

    pub fn table_row(&self) -> String {
        format!(
            "{:<14} {:>8.4}  {:>10.4}  {:>6.4}  {:>6.4}",
            self.mode, self.acc_seen, self.acc_unseen, self.h_mean, self.ausuc
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_class_mean_not_per_sample() {
        // class 0: 1 of 2 correct, class 1: 1 of 1 correct
        let acc = per_class_top1(&[0, 1, 1], &[0, 0, 1], &[0, 1]);
        assert_eq!(acc, 0.75);
        assert_eq!(per_class_top1(&[2, 3], &[2, 3], &[2, 3]), 1.0);
    }

    #[test]
    fn classes_outside_the_set_are_ignored() {
        assert_eq!(per_class_top1(&[5, 0, 9], &[5, 1, 9], &[5, 9]), 1.0);
        // class 7 has no samples: excluded, not counted as 0
        assert_eq!(per_class_top1(&[5], &[5], &[5, 7]), 1.0);
        assert_eq!(per_class_top1(&[], &[], &[1]), 0.0);
    }

    #[test]
    fn harmonic_mean_examples() {
        assert_eq!(h_mean(0.0, 0.0), 0.0);
        assert_eq!(h_mean(0.0, 0.4), 0.0);
        assert!((h_mean(0.3, 0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn area_of_hand_made_curves() {
        assert_eq!(curve_area(&[(0.0, 1.0), (1.0, 0.0)]), 0.5);
        assert_eq!(curve_area(&[(1.0, 0.0), (0.5, 0.5), (0.0, 1.0)]), 0.5);
        assert_eq!(curve_area(&[(0.3, 0.7)]), 0.0);
    }

    #[test]
    fn grid_contains_zero() {
        let g = default_grid(0.8, 201);
        assert_eq!(g.len(), 201);
        assert_eq!(g[100], 0.0);
        assert_eq!(g[0], -0.8);
        assert_eq!(g[200], 0.8);
        assert!(default_grid(1.0, 4).contains(&0.0));
        assert_eq!(default_grid(0.0, 1), vec![0.0]);
    }

    #[test]
    fn infinite_shifts_restrict_the_domain() {
        let d = ClassDomains::new(vec![DomainLabel::Seen, DomainLabel::Unseen, DomainLabel::Unseen]);
        let row = [0.9, 0.05, 0.06];
        assert_eq!(shifted_argmax(&row, &d, f64::INFINITY), 2);
        assert_eq!(shifted_argmax(&row, &d, f64::NEG_INFINITY), 0);
        assert_eq!(shifted_argmax(&row, &d, 0.0), 0);
        assert_eq!(shifted_argmax(&row, &d, 0.85), 2);
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }

    #[test]
    fn lambda_serialisation_handles_infinities() {
        let pts = vec![
            CurvePoint { lambda: f64::NEG_INFINITY, acc_seen: 1.0, acc_unseen: 0.0 },
            CurvePoint { lambda: 0.25, acc_seen: 0.5, acc_unseen: 0.5 },
        ];
        let text = serde_json::to_string(&pts).unwrap();
        assert!(text.contains("\"-inf\""), "{text}");
        let back: Vec<CurvePoint> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, pts);
    }
}
