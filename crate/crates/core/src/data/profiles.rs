//! Published split sizes of the standard benchmarks, used to sanity-check
//! ingested feature files.

use std::collections::BTreeSet;

use super::{class_counts, Dataset};
use crate::autodiff::{NormalSource, Rng, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchmarkProfile {
    pub name: &'static str,
    /// Seen classes used for training proper.
    pub seen_train: usize,
    /// Seen classes held out for validation.
    pub seen_val: usize,
    pub unseen: usize,
    pub n_train: usize,
    pub n_test_unseen: usize,
    pub n_test_seen: usize,
}

impl BenchmarkProfile {
    pub fn seen(&self) -> usize {
        self.seen_train + self.seen_val
    }

    pub fn lookup(name: &str) -> Option<&'static BenchmarkProfile> {
        PROFILES.iter().find(|p| p.name.eq_ignore_ascii_case(name))
    }

    /// Every mismatch between `stats` and this profile.
    pub fn mismatches(&self, stats: &DatasetStats) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |what: &str, want: usize, got: usize| {
            if want != got {
                out.push(format!("{}: expected {want} {what}, found {got}", self.name));
            }
        };
        check("seen classes", self.seen(), stats.seen_classes);
        check("unseen classes", self.unseen, stats.unseen_classes);
        check("training samples", self.n_train, stats.n_train);
        check("unseen test samples", self.n_test_unseen, stats.n_test_unseen);
        check("seen test samples", self.n_test_seen, stats.n_test_seen);
        if let Some(v) = stats.val_classes {
            check("validation classes", self.seen_val, v);
        }
        out
    }
}

// SUN lists 745 seen classes next to a 580+65 train/val breakdown; the
// breakdown (645) is what the 717-class benchmark actually has.
pub const PROFILES: &[BenchmarkProfile] = &[
    BenchmarkProfile { name: "CUB", seen_train: 100, seen_val: 50, unseen: 50, n_train: 7057, n_test_unseen: 1764, n_test_seen: 2967 },
    BenchmarkProfile { name: "SUN", seen_train: 580, seen_val: 65, unseen: 72, n_train: 14340, n_test_unseen: 2580, n_test_seen: 1440 },
    BenchmarkProfile { name: "AWA1", seen_train: 27, seen_val: 13, unseen: 10, n_train: 19832, n_test_unseen: 4958, n_test_seen: 5685 },
    BenchmarkProfile { name: "AWA2", seen_train: 27, seen_val: 13, unseen: 10, n_train: 23527, n_test_unseen: 5882, n_test_seen: 7913 },
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetStats {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub val_classes: Option<usize>,
    pub n_train: usize,
    pub n_test_seen: usize,
    pub n_test_unseen: usize,
    pub visual_dim: usize,
    pub semantic_dim: usize,
}

impl DatasetStats {
    pub fn of(ds: &Dataset) -> Self {
        DatasetStats {
            seen_classes: ds.seen_classes.len(),
            unseen_classes: ds.unseen_classes.len(),
            val_classes: ds.val_classes.as_ref().map(BTreeSet::len),
            n_train: ds.train_idx.len(),
            n_test_seen: ds.test_seen_idx.len(),
            n_test_unseen: ds.test_unseen_idx.len(),
            visual_dim: ds.visual_dim(),
            semantic_dim: ds.semantic_dim(),
        }
    }
}

fn spread(total: usize, classes: &[usize], out: &mut Vec<usize>) {
    let k = classes.len();
    for i in 0..total {
        out.push(classes[i % k]);
    }
}

/// Random features with exactly the class and split sizes of `profile`.
/// Useful for exercising ingestion at real benchmark scale without the
/// real feature files.
pub fn shaped_like(
    profile: &BenchmarkProfile,
    visual_dim: usize,
    semantic_dim: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = Rng::new(seed);
    let seen: Vec<usize> = (0..profile.seen()).collect();
    let unseen: Vec<usize> = (profile.seen()..profile.seen() + profile.unseen).collect();
    let mut labels = Vec::new();
    spread(profile.n_train, &seen, &mut labels);
    spread(profile.n_test_seen, &seen, &mut labels);
    spread(profile.n_test_unseen, &unseen, &mut labels);
    let n = labels.len();
    let c = seen.len() + unseen.len();
    let a = profile.n_train;
    let b = a + profile.n_test_seen;
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.standard_normal() as f32 as f64).collect()
    };
    let ds = Dataset {
        visual: Tensor::matrix(n, visual_dim, draw(n * visual_dim))?,
        semantic: Tensor::matrix(c, semantic_dim, draw(c * semantic_dim))?,
        labels,
        seen_classes: seen.iter().copied().collect(),
        unseen_classes: unseen.iter().copied().collect(),
        train_idx: (0..a).collect(),
        test_seen_idx: (a..b).collect(),
        test_unseen_idx: (b..n).collect(),
        val_classes: Some(seen[profile.seen_train..].iter().copied().collect()),
    }
    .validated()?;
    debug_assert_eq!(
        class_counts(&ds, &ds.test_unseen_idx).iter().sum::<usize>(),
        profile.n_test_unseen
    );
    Ok(ds)
}
