use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::autodiff::{NormalSource, Rng, Tensor};
use crate::error::{Error, Result};

/// Parameters of the Gaussian-cluster benchmark.
///
/// Class prototypes `a_c ~ N(0, I)` are the semantic rows (plus optional
/// `semantic_noise`). Visual class means are `M · a_c` for a fixed random
/// `M` scaled so the expected distance between two class means is 1.
/// Samples are `mean + cluster_spread · N(0, I)`, rounded to `f32`.
/// `visual_offset` shifts every visual coordinate by a constant, which keeps
/// features non-negative for generators with a relu output.
///
/// Seen classes `0..n_seen` get `samples_per_class` training and
/// `samples_per_class` test samples each; unseen classes get
/// `samples_per_class` test samples only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_seen_classes: usize,
    pub n_unseen_classes: usize,
    pub visual_dim: usize,
    pub semantic_dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub semantic_noise: f64,
    pub visual_offset: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_seen_classes: 8,
            n_unseen_classes: 4,
            visual_dim: 32,
            semantic_dim: 8,
            samples_per_class: 50,
            cluster_spread: 0.1,
            semantic_noise: 0.0,
            visual_offset: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_seen_classes", self.n_seen_classes),
            ("n_unseen_classes", self.n_unseen_classes),
            ("visual_dim", self.visual_dim),
            ("semantic_dim", self.semantic_dim),
            ("samples_per_class", self.samples_per_class),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::config("cluster_spread", "must be positive"));
        }
        if !(self.semantic_noise >= 0.0 && self.semantic_noise.is_finite()) {
            return Err(Error::config("semantic_noise", "must be non-negative"));
        }
        if !self.visual_offset.is_finite() {
            return Err(Error::config("visual_offset", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBenchmark {
    pub dataset: Dataset,
    /// C×K true visual class means.
    pub visual_means: Tensor,
}

pub fn synth_benchmark(spec: &SynthSpec) -> Result<Dataset> {
    synth_benchmark_detailed(spec).map(|b| b.dataset)
}

pub fn synth_benchmark_detailed(spec: &SynthSpec) -> Result<SynthBenchmark> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let (s, u) = (spec.n_seen_classes, spec.n_unseen_classes);
    let c = s + u;
    let (k, l) = (spec.visual_dim, spec.semantic_dim);

    let prototypes: Vec<f64> = (0..c * l).map(|_| rng.standard_normal()).collect();
    let m_std = (1.0 / (2.0 * k as f64 * l as f64)).sqrt();
    let projection: Vec<f64> = (0..k * l).map(|_| m_std * rng.standard_normal()).collect();

    let mut means = vec![0.0; c * k];
    for cls in 0..c {
        let a = &prototypes[cls * l..(cls + 1) * l];
        for r in 0..k {
            let m = &projection[r * l..(r + 1) * l];
            means[cls * k + r] = spec.visual_offset + a.iter().zip(m).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    let semantic: Vec<f64> = prototypes
        .iter()
        .map(|&v| (v + spec.semantic_noise * rng.standard_normal()) as f32 as f64)
        .collect();

    let mut visual = Vec::new();
    let mut labels = Vec::new();
    let (mut train_idx, mut test_seen_idx, mut test_unseen_idx) = (vec![], vec![], vec![]);
    let draw = |cls: usize, rng: &mut Rng, visual: &mut Vec<f64>, labels: &mut Vec<usize>| {
        for r in 0..k {
            let x = means[cls * k + r] + spec.cluster_spread * rng.standard_normal();
            visual.push(x as f32 as f64);
        }
        labels.push(cls);
        labels.len() - 1
    };
    for cls in 0..c {
        if cls < s {
            for _ in 0..spec.samples_per_class {
                train_idx.push(draw(cls, &mut rng, &mut visual, &mut labels));
            }
            for _ in 0..spec.samples_per_class {
                test_seen_idx.push(draw(cls, &mut rng, &mut visual, &mut labels));
            }
        } else {
            for _ in 0..spec.samples_per_class {
                test_unseen_idx.push(draw(cls, &mut rng, &mut visual, &mut labels));
            }
        }
    }
    let n = labels.len();
    let dataset = Dataset {
        visual: Tensor::matrix(n, k, visual)?,
        labels,
        semantic: Tensor::matrix(c, l, semantic)?,
        seen_classes: (0..s).collect::<BTreeSet<_>>(),
        unseen_classes: (s..c).collect::<BTreeSet<_>>(),
        train_idx,
        test_seen_idx,
        test_unseen_idx,
        val_classes: None,
    }
    .validated()?;
    Ok(SynthBenchmark {
        dataset,
        visual_means: Tensor::matrix(c, k, means)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{class_counts, validate_splits};

    #[test]
    fn counts_and_coverage() {
        let ds = synth_benchmark(&SynthSpec::default()).unwrap();
        assert_eq!(ds.train_idx.len(), 400);
        let mut test = ds.test_seen_idx.clone();
        test.extend(&ds.test_unseen_idx);
        let counts = class_counts(&ds, &test);
        assert_eq!(counts.len(), 12);
        assert!(counts.iter().all(|&n| n == 50));
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = SynthSpec {
            seed: 99,
            ..SynthSpec::default()
        };
        assert_eq!(synth_benchmark(&spec).unwrap(), synth_benchmark(&spec).unwrap());
        let other = SynthSpec { seed: 100, ..spec };
        assert_ne!(
            synth_benchmark(&other).unwrap().visual,
            synth_benchmark(&SynthSpec { seed: 99, ..SynthSpec::default() }).unwrap().visual
        );
    }

    #[test]
    fn nearest_prototype_oracle() {
        // Classify every sample by its nearest true class mean; a spread of 0.1
        // against unit mean separation should leave each class > 95% correct.
        let b = synth_benchmark_detailed(&SynthSpec::default()).unwrap();
        let ds = &b.dataset;
        let c = ds.num_classes();
        let mut hits = vec![0usize; c];
        let mut totals = vec![0usize; c];
        for i in 0..ds.visual.rows() {
            let x = ds.visual.row(i);
            let best = (0..c)
                .min_by(|&p, &q| {
                    let d = |m: &[f64]| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    d(b.visual_means.row(p)).total_cmp(&d(b.visual_means.row(q)))
                })
                .unwrap();
            totals[ds.labels[i]] += 1;
            hits[ds.labels[i]] += usize::from(best == ds.labels[i]);
        }
        for cls in 0..c {
            let acc = hits[cls] as f64 / totals[cls] as f64;
            assert!(acc > 0.95, "class {cls}: {acc}");
        }
    }

    #[test]
    fn invalid_specs() {
        for bad in [
            SynthSpec { n_unseen_classes: 0, ..SynthSpec::default() },
            SynthSpec { cluster_spread: 0.0, ..SynthSpec::default() },
            SynthSpec { visual_dim: 0, ..SynthSpec::default() },
        ] {
            assert!(matches!(synth_benchmark(&bad), Err(Error::Config { .. })));
        }
        assert!(validate_splits(&synth_benchmark(&SynthSpec::default()).unwrap()).is_empty());
    }
}
