//! Dataset schema, split validation, on-disk format and the synthetic
//! benchmark generator.

mod io;
mod profiles;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub use io::{import_csv, load_dataset, save_dataset, SplitsFile};
pub use profiles::{shaped_like, BenchmarkProfile, DatasetStats, PROFILES};
pub use synth::{synth_benchmark, synth_benchmark_detailed, SynthBenchmark, SynthSpec};

use crate::autodiff::{Rng, Tensor};
use crate::error::{Error, Result};

/// Visual features, labels, per-class semantics and the seen/unseen split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N×K visual features.
    pub visual: Tensor,
    /// N class ids in `0..C`.
    pub labels: Vec<usize>,
    /// C×L semantic matrix, one row per class.
    pub semantic: Tensor,
    pub seen_classes: BTreeSet<usize>,
    pub unseen_classes: BTreeSet<usize>,
    pub train_idx: Vec<usize>,
    pub test_seen_idx: Vec<usize>,
    pub test_unseen_idx: Vec<usize>,
    pub val_classes: Option<BTreeSet<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    TestSeen,
    TestUnseen,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train_idx",
            SplitName::TestSeen => "test_seen_idx",
            SplitName::TestUnseen => "test_unseen_idx",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    LabelCountMismatch { rows: usize, labels: usize },
    ClassInBothDomains(usize),
    ClassWithoutDomain(usize),
    ClassWithoutSemanticRow(usize),
    LabelOutOfRange { index: usize, label: usize },
    IndexOutOfRange { split: SplitName, index: usize },
    DuplicateIndex { index: usize, first: SplitName, second: SplitName },
    UnseenInTraining { index: usize, class: usize },
    WrongDomainInTest { split: SplitName, index: usize, class: usize },
    ValClassNotSeen(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            LabelCountMismatch { rows, labels } => {
                write!(f, "{rows} visual rows but {labels} labels")
            }
            ClassInBothDomains(c) => write!(f, "class {c} is both seen and unseen"),
            ClassWithoutDomain(c) => write!(f, "class {c} is neither seen nor unseen"),
            ClassWithoutSemanticRow(c) => write!(f, "class {c} has no semantic row"),
            LabelOutOfRange { index, label } => {
                write!(f, "sample {index} has label {label} outside the class range")
            }
            IndexOutOfRange { split, index } => write!(f, "{split} holds out-of-range index {index}"),
            DuplicateIndex { index, first, second } => {
                write!(f, "index {index} appears in both {first} and {second}")
            }
            UnseenInTraining { index, class } => write!(
                f,
                "training sample {index} belongs to unseen class {class}; \
                 unseen visuals must never be available for training"
            ),
            WrongDomainInTest { split, index, class } => {
                write!(f, "{split} sample {index} has class {class} from the other domain")
            }
            ValClassNotSeen(c) => write!(f, "validation class {c} is not a seen class"),
        }
    }
}

/// Training indices plus the domain assignment a model is trained under.
///
/// Normally mirrors the dataset; during calibration some seen classes are
/// moved to the unseen side.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit {
    pub train_idx: Vec<usize>,
    pub seen: BTreeSet<usize>,
    pub unseen: BTreeSet<usize>,
}

impl DomainSplit {
    pub fn from_dataset(ds: &Dataset) -> Self {
        DomainSplit {
            train_idx: ds.train_idx.clone(),
            seen: ds.seen_classes.clone(),
            unseen: ds.unseen_classes.clone(),
        }
    }
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.semantic.rows()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.cols()
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic.cols()
    }

    /// Validates and returns `self`, or a data error listing every violation.
    pub fn validated(self) -> Result<Self> {
        let v = validate_splits(&self);
        if v.is_empty() {
            Ok(self)
        } else {
            let msg: Vec<String> = v.iter().map(ToString::to_string).collect();
            Err(Error::Data(msg.join("; ")))
        }
    }

    /// Scales every visual row to unit L2 norm. Zero rows are left alone.
    pub fn l2_normalize_visual(&mut self) {
        let c = self.visual.cols();
        for row in self.visual.data_mut().chunks_mut(c.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats::of(self)
    }

    /// Validation classes: the dataset's own, or a seeded 20% of seen classes.
    pub fn resolve_val_classes(&self, seed: u64) -> BTreeSet<usize> {
        if let Some(v) = &self.val_classes {
            return v.clone();
        }
        let mut seen: Vec<usize> = self.seen_classes.iter().copied().collect();
        if seen.len() < 2 {
            return BTreeSet::new();
        }
        let k = ((seen.len() as f64 * 0.2).round() as usize).clamp(1, seen.len() - 1);
        Rng::new(seed).shuffle(&mut seen);
        seen.into_iter().take(k).collect()
    }
}

/// Every invariant violation of `ds`; empty means valid.
pub fn validate_splits(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = ds.visual.rows();
    let c = ds.num_classes();
    if ds.labels.len() != n {
        out.push(Violation::LabelCountMismatch {
            rows: n,
            labels: ds.labels.len(),
        });
    }
    for cls in ds.seen_classes.intersection(&ds.unseen_classes) {
        out.push(Violation::ClassInBothDomains(*cls));
    }
    for cls in ds.seen_classes.union(&ds.unseen_classes) {
        if *cls >= c {
            out.push(Violation::ClassWithoutSemanticRow(*cls));
        }
    }
    for cls in 0..c {
        if !ds.seen_classes.contains(&cls) && !ds.unseen_classes.contains(&cls) {
            out.push(Violation::ClassWithoutDomain(cls));
        }
    }
    for (i, &y) in ds.labels.iter().enumerate() {
        if y >= c {
            out.push(Violation::LabelOutOfRange { index: i, label: y });
        }
    }
    if let Some(val) = &ds.val_classes {
        for cls in val {
            if !ds.seen_classes.contains(cls) {
                out.push(Violation::ValClassNotSeen(*cls));
            }
        }
    }

    let splits = [
        (SplitName::Train, &ds.train_idx),
        (SplitName::TestSeen, &ds.test_seen_idx),
        (SplitName::TestUnseen, &ds.test_unseen_idx),
    ];
    let mut owner: BTreeMap<usize, SplitName> = BTreeMap::new();
    for (name, idx) in splits {
        for &i in idx.iter() {
            if i >= n || i >= ds.labels.len() {
                out.push(Violation::IndexOutOfRange { split: name, index: i });
                continue;
            }
            if let Some(&first) = owner.get(&i) {
                out.push(Violation::DuplicateIndex {
                    index: i,
                    first,
                    second: name,
                });
                continue;
            }
            owner.insert(i, name);
            let class = ds.labels[i];
            match name {
                SplitName::Train if ds.unseen_classes.contains(&class) => {
                    out.push(Violation::UnseenInTraining { index: i, class })
                }
                SplitName::TestSeen if ds.unseen_classes.contains(&class) => {
                    out.push(Violation::WrongDomainInTest { split: name, index: i, class })
                }
                SplitName::TestUnseen if ds.seen_classes.contains(&class) => {
                    out.push(Violation::WrongDomainInTest { split: name, index: i, class })
                }
                _ => {}
            }
        }
    }
    out
}

/// Per-class sample counts over `idx`, for every class in the dataset.
pub fn class_counts(ds: &Dataset, idx: &[usize]) -> Vec<usize> {
    let mut counts = vec![0; ds.num_classes()];
    for &i in idx {
        if let Some(slot) = ds.labels.get(i).and_then(|&y| counts.get_mut(y)) {
            *slot += 1;
        }
    }
    counts
}
