//! Latent class head and the end-to-end prediction pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Activation, Adam, AdamConfig, Checkpoint, Graph, Mlp, ParamStore, Rng, Tensor};
use crate::data::{Dataset, DomainSplit};
use crate::error::{Error, Result};
use crate::eval::{argmax, default_grid, per_class_top1, EvalReport, TestScores};
use crate::gate::{domain_prob, gate_rows, ClassDomains, DomainClassifier, DomainLabel};
use crate::latent::{self, LatentModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Optional hidden layer width; `None` is a single linear layer.
    pub hidden: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub n_unseen_draws_per_class: usize,
    /// Upsample every class (with replacement) to the largest class's count.
    pub class_balance: bool,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: None,
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            n_unseen_draws_per_class: 200,
            class_balance: true,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == Some(0) {
            return Err(Error::config("head.hidden", "must be at least 1 when set"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("head.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("head.lr", "must be positive"));
        }
        Ok(())
    }
}

/// Latent rows with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub latents: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Appends resampled rows so every class reaches the largest class's count.
    pub fn balanced(&self, rng: &mut Rng) -> LabeledSet {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.labels.iter().enumerate() {
            by_class.entry(c).or_default().push(i);
        }
        let target = by_class.values().map(Vec::len).max().unwrap_or(0);
        let mut idx: Vec<usize> = (0..self.labels.len()).collect();
        for rows in by_class.values() {
            idx.extend((rows.len()..target).map(|_| rows[rng.below(rows.len())]));
        }
        LabeledSet { latents: self.latents.select_rows(&idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }
}

/// Seen classes contribute encoded training visuals; unseen classes
/// contribute `n_unseen_draws_per_class` latents drawn from their semantic
/// rows only. With `class_balance` every class is then upsampled to the
/// largest class's count.
pub fn build_head_training_set(
    model: &dyn LatentModel,
    ds: &Dataset,
    split: &DomainSplit,
    cfg: &HeadConfig,
) -> Result<LabeledSet> {
    let mut rng = Rng::new(cfg.seed);
    let seen = model.embed_visual(&ds.visual.select_rows(&split.train_idx))?;
    let mut labels: Vec<usize> = split.train_idx.iter().map(|&i| ds.labels[i]).collect();
    let unseen: Vec<usize> = split.unseen.iter().copied().collect();
    let draws = model.semantic_draws(&ds.semantic.select_rows(&unseen), cfg.n_unseen_draws_per_class, &mut rng)?;
    labels.extend(unseen.iter().flat_map(|&c| std::iter::repeat_n(c, cfg.n_unseen_draws_per_class)));
    let set = LabeledSet { latents: Tensor::vstack(&[seen, draws])?, labels };
    Ok(if cfg.class_balance { set.balanced(&mut rng) } else { set })
}

#[derive(Debug, Clone)]
pub struct ClassHead {
    pub store: ParamStore,
    pub mlp: Mlp,
}

impl ClassHead {
    pub fn new(latent_dim: usize, num_classes: usize, hidden: Option<usize>, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let dims: Vec<usize> = match hidden {
            Some(h) => vec![latent_dim, h, num_classes],
            None => vec![latent_dim, num_classes],
        };
        let mlp = Mlp::new(&mut store, "head", &dims, Activation::Relu, Activation::Identity, rng);
        ClassHead { store, mlp }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let store = ck.into_store();
        let mlp = Mlp::from_store(&store, "head", Activation::Relu, Activation::Identity)?;
        Ok(ClassHead { store, mlp })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.mlp.out_dim()
    }

    /// N×C softmax probabilities.
    pub fn probs(&self, z: &Tensor) -> Result<Tensor> {
        z.expect_matrix("class head", self.latent_dim())?;
        Ok(softmax_rows(&self.mlp.eval(&self.store, z)?))
    }
}

/// Cross-entropy training over all `num_classes` classes, each of which must
/// appear in `set`.
pub fn train_head(set: &LabeledSet, num_classes: usize, cfg: &HeadConfig) -> Result<ClassHead> {
    cfg.validate()?;
    let present = set.classes();
    let missing: Vec<usize> = (0..num_classes).filter(|c| !present.contains(c)).collect();
    if !missing.is_empty() {
        return Err(Error::Contract(format!("head training set lacks classes {missing:?}")));
    }
    if let Some(&c) = present.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Contract(format!("label {c} outside 0..{num_classes}")));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut head = ClassHead::new(set.latents.cols(), num_classes, cfg.hidden, &mut rng);
    let mut adam = Adam::new(&head.store, head.store.ids(), AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..set.labels.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let y: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
            let mut g = Graph::new(&head.store);
            let x = g.input(set.latents.select_rows(chunk));
            let grads = head
                .mlp
                .forward(&mut g, x)
                .and_then(|l| g.cross_entropy(l, &y))
                .and_then(|l| g.backward(l))
                .map_err(|e| Error::Numeric(format!("class head epoch {epoch}: {e}")))?;
            drop(g);
            head.store.zero_grad();
            head.store.accumulate(&grads);
            adam.step(&mut head.store);
        }
    }
    head.store.zero_grad();
    head.store.round_to_f32();
    Ok(head)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    GzslWithDc,
    GzslPlain,
    Zsl,
}

impl PredictionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictionMode::GzslWithDc => "gzsl_with_dc",
            PredictionMode::GzslPlain => "gzsl_plain",
            PredictionMode::Zsl => "zsl",
        }
    }
}

impl fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gzsl_with_dc" => Ok(PredictionMode::GzslWithDc),
            "gzsl_plain" => Ok(PredictionMode::GzslPlain),
            "zsl" => Ok(PredictionMode::Zsl),
            other => Err(Error::config("mode", format!("unknown prediction mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// N×C scores whose row-wise argmax (within the mode's label space) is `labels`.
    pub scores: Tensor,
}

#[derive(Debug)]
pub struct Pipeline {
    pub latent: Box<dyn LatentModel>,
    pub head: ClassHead,
    pub dc: Option<DomainClassifier>,
    pub class_domains: ClassDomains,
    pub mode: PredictionMode,
}

impl Pipeline {
    pub fn new(
        latent: Box<dyn LatentModel>,
        head: ClassHead,
        dc: Option<DomainClassifier>,
        class_domains: ClassDomains,
        mode: PredictionMode,
    ) -> Result<Self> {
        let p = Pipeline { latent, head, dc, class_domains, mode };
        p.check_consistency().map_err(|e| Error::Contract(e.to_string()))?;
        Ok(p)
    }

    fn check_consistency(&self) -> Result<()> {
        let z = self.latent.latent_dim();
        if self.head.latent_dim() != z {
            return Err(Error::Integrity(format!("head expects {}-d latents, model gives {z}", self.head.latent_dim())));
        }
        if self.head.num_classes() != self.class_domains.len() {
            return Err(Error::Integrity(format!(
                "head has {} classes, class domains cover {}",
                self.head.num_classes(),
                self.class_domains.len()
            )));
        }
        if let Some(dc) = &self.dc {
            if dc.latent_dim() != z {
                return Err(Error::Integrity(format!("domain classifier expects {}-d latents, model gives {z}", dc.latent_dim())));
            }
        }
        if self.mode == PredictionMode::GzslWithDc && self.dc.is_none() {
            return Err(Error::Integrity("gzsl_with_dc mode without a domain classifier".into()));
        }
        Ok(())
    }

    pub fn family(&self) -> &'static str {
        self.latent.family()
    }

    pub fn with_mode(mut self, mode: PredictionMode) -> Result<Self> {
        if mode == PredictionMode::GzslWithDc && self.dc.is_none() {
            return Err(Error::Contract("gzsl_with_dc needs a domain classifier".into()));
        }
        self.mode = mode;
        Ok(self)
    }

    /// Class scores of visual rows under `mode`. `zsl` zeroes seen classes.
    pub fn scores(&self, visual: &Tensor, mode: PredictionMode) -> Result<Tensor> {
        let z = self.latent.embed_visual(visual)?;
        let p = self.head.probs(&z)?;
        match mode {
            PredictionMode::GzslPlain => Ok(p),
            PredictionMode::GzslWithDc => {
                let dc = self.dc.as_ref().ok_or_else(|| Error::Contract("gzsl_with_dc needs a domain classifier".into()))?;
                gate_rows(&p, &domain_prob(dc, &z)?, &self.class_domains)
            }
            PredictionMode::Zsl => {
                let c = self.class_domains.len();
                let mut out = p.into_data();
                for (k, v) in out.iter_mut().enumerate() {
                    if self.class_domains.get(k % c) == Some(DomainLabel::Seen) {
                        *v = 0.0;
                    }
                }
                Tensor::matrix(visual.rows(), c, out)
            }
        }
    }

    pub fn predict(&self, visual: &Tensor) -> Result<Prediction> {
        self.predict_with(visual, self.mode)
    }

    pub fn predict_with(&self, visual: &Tensor, mode: PredictionMode) -> Result<Prediction> {
        let scores = self.scores(visual, mode)?;
        let unseen = self.class_domains.classes_in(DomainLabel::Unseen);
        let labels = (0..scores.rows())
            .map(|i| {
                let row = scores.row(i);
                match mode {
                    PredictionMode::Zsl => {
                        let sub: Vec<f64> = unseen.iter().map(|&c| row[c]).collect();
                        unseen[argmax(&sub)]
                    }
                    _ => argmax(row),
                }
            })
            .collect();
        Ok(Prediction { labels, scores })
    }

    pub fn test_scores(&self, ds: &Dataset, mode: PredictionMode) -> Result<TestScores> {
        if ds.test_seen_idx.is_empty() || ds.test_unseen_idx.is_empty() {
            return Err(Error::Data("evaluation needs non-empty test_seen_idx and test_unseen_idx".into()));
        }
        Ok(TestScores {
            seen_scores: self.scores(&ds.visual.select_rows(&ds.test_seen_idx), mode)?,
            seen_labels: ds.test_seen_idx.iter().map(|&i| ds.labels[i]).collect(),
            unseen_scores: self.scores(&ds.visual.select_rows(&ds.test_unseen_idx), mode)?,
            unseen_labels: ds.test_unseen_idx.iter().map(|&i| ds.labels[i]).collect(),
        })
    }

    /// Full GZSL report for a generalised mode. `grid_points` shifts span
    /// `[−max|score|, max|score|]` and always include 0.
    pub fn full_report(&self, ds: &Dataset, mode: PredictionMode, grid_points: usize) -> Result<EvalReport> {
        if mode == PredictionMode::Zsl {
            return Err(Error::Contract("zsl mode has no seen/unseen report; use zsl_accuracy".into()));
        }
        self.check_dataset(ds)?;
        let scores = self.test_scores(ds, mode)?;
        let grid = default_grid(scores.max_abs(), grid_points);
        Ok(EvalReport::from_scores(mode.as_str(), &scores, &self.class_domains, &grid))
    }

    /// Per-class accuracy on unseen test samples, predicting among unseen classes only.
    pub fn zsl_accuracy(&self, ds: &Dataset) -> Result<f64> {
        self.check_dataset(ds)?;
        if ds.test_unseen_idx.is_empty() {
            return Err(Error::Data("evaluation needs a non-empty test_unseen_idx".into()));
        }
        let pred = self.predict_with(&ds.visual.select_rows(&ds.test_unseen_idx), PredictionMode::Zsl)?;
        let labels: Vec<usize> = ds.test_unseen_idx.iter().map(|&i| ds.labels[i]).collect();
        Ok(per_class_top1(&pred.labels, &labels, &self.class_domains.classes_in(DomainLabel::Unseen)))
    }

    /// Integrity error unless `ds` has the class domains and visual width this pipeline was trained on.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let expect = ClassDomains::of_dataset(ds)?;
        if expect != self.class_domains {
            return Err(Error::Integrity("dataset seen/unseen split differs from the pipeline's class domains".into()));
        }
        if ds.visual_dim() != self.latent.visual_dim() {
            return Err(Error::Integrity(format!(
                "dataset has {}-d visuals, pipeline expects {}",
                ds.visual_dim(),
                self.latent.visual_dim()
            )));
        }
        Ok(())
    }

    /// Writes checkpoints, the temperature sidecar and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            family: self.family().to_string(),
            latent_checkpoint: "latent.ckpt".into(),
            head_checkpoint: "head.ckpt".into(),
            dc_checkpoint: self.dc.as_ref().map(|_| "dc.ckpt".into()),
            dc_temperature: self.dc.as_ref().map(|_| "dc.temperature".into()),
            mode: self.mode,
            class_domains: self.class_domains.clone(),
            latent_dim: self.latent.latent_dim(),
            visual_dim: self.latent.visual_dim(),
            semantic_dim: self.latent.semantic_dim(),
        };
        self.latent.checkpoint().save(dir.join(&manifest.latent_checkpoint))?;
        self.head.checkpoint().save(dir.join(&manifest.head_checkpoint))?;
        if let (Some(dc), Some(ck), Some(t)) = (&self.dc, &manifest.dc_checkpoint, &manifest.dc_temperature) {
            dc.checkpoint().save(dir.join(ck))?;
            dc.save_temperature(&dir.join(t))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Loads a pipeline from a manifest file or the directory holding one.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Integrity(format!("{}: {e}", manifest_path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Integrity(format!("manifest version {} not supported", m.format_version)));
        }
        let family = latent::lookup(&m.family).map_err(|e| Error::Integrity(e.to_string()))?;
        let latent = family.load(Checkpoint::load(dir.join(&m.latent_checkpoint))?)?;
        let head = ClassHead::from_checkpoint(Checkpoint::load(dir.join(&m.head_checkpoint))?)?;
        let dc = match (&m.dc_checkpoint, &m.dc_temperature) {
            (Some(ck), Some(t)) => Some(DomainClassifier::from_checkpoint(
                Checkpoint::load(dir.join(ck))?,
                DomainClassifier::load_temperature(&dir.join(t))?,
            )?),
            (None, None) => None,
            _ => return Err(Error::Integrity("manifest names only one of dc_checkpoint / dc_temperature".into())),
        };
        if (latent.latent_dim(), latent.visual_dim(), latent.semantic_dim()) != (m.latent_dim, m.visual_dim, m.semantic_dim) {
            return Err(Error::Integrity("latent checkpoint dimensions differ from the manifest".into()));
        }
        let p = Pipeline { latent, head, dc, class_domains: m.class_domains, mode: m.mode };
        p.check_consistency()?;
        Ok(p)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub family: String,
    pub latent_checkpoint: String,
    pub head_checkpoint: String,
    pub dc_checkpoint: Option<String>,
    pub dc_temperature: Option<String>,
    pub mode: PredictionMode,
    pub class_domains: ClassDomains,
    pub latent_dim: usize,
    pub visual_dim: usize,
    pub semantic_dim: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NormalSource;

    /// Gaussian blobs in a 4-d latent space, one per class.
    fn blobs(classes: usize, per_class: usize, seed: u64) -> LabeledSet {
        let mut rng = Rng::new(seed);
        let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..4).map(|_| 3.0 * rng.standard_normal()).collect()).collect();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                data.extend(center.iter().map(|m| m + 0.1 * rng.standard_normal()));
                labels.push(c);
            }
        }
        LabeledSet { latents: Tensor::matrix(labels.len(), 4, data).unwrap(), labels }
    }

    #[test]
    fn head_learns_separated_blobs() {
        let set = blobs(5, 30, 1);
        let cfg = HeadConfig { epochs: 60, lr: 1e-2, ..HeadConfig::default() };
        let head = train_head(&set, 5, &cfg).unwrap();
        let p = head.probs(&set.latents).unwrap();
        let preds: Vec<usize> = (0..p.rows()).map(|i| argmax(p.row(i))).collect();
        for c in 0..5 {
            assert!(per_class_top1(&preds, &set.labels, &[c]) > 0.95);
        }
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(train_head(&set, 5, &cfg).unwrap().checkpoint(), head.checkpoint());
    }

    #[test]
    fn missing_classes_are_listed() {
        let set = blobs(3, 5, 2);
        let err = train_head(&set, 5, &HeadConfig::default()).unwrap_err();
        assert!(err.to_string().contains("[3, 4]"), "{err}");
    }

    #[test]
    fn modes_parse() {
        for m in [PredictionMode::GzslWithDc, PredictionMode::GzslPlain, PredictionMode::Zsl] {
            assert_eq!(m.as_str().parse::<PredictionMode>().unwrap(), m);
        }
        assert!("both".parse::<PredictionMode>().is_err());
    }
}
