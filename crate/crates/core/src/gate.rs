//! Seen/unseen domain classifier, temperature calibration and the gating
//! rule that combines class and domain probabilities.
//!
//! The gated score of class `y` is `p(y|z)·p_s` for a seen class and
//! `p(y|z)·p_u` for an unseen one; cross-domain products are dropped.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    log_sum_exp, softmax_rows, Activation, Adam, AdamConfig, Checkpoint, Graph, Mlp, ParamStore, Rng, Tensor,
};
use crate::data::{Dataset, DomainSplit};
use crate::error::{Error, Result};
use crate::latent::LatentModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainLabel {
    Seen,
    Unseen,
}

impl DomainLabel {
    /// Logit column: 0 for seen, 1 for unseen.
    pub fn index(self) -> usize {
        match self {
            DomainLabel::Seen => 0,
            DomainLabel::Unseen => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            DomainLabel::Seen => DomainLabel::Unseen,
            DomainLabel::Unseen => DomainLabel::Seen,
        }
    }
}

impl fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainLabel::Seen => "seen",
            DomainLabel::Unseen => "unseen",
        })
    }
}

/// Domain of every class id `0..C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassDomains(Vec<DomainLabel>);

impl ClassDomains {
    pub fn new(labels: Vec<DomainLabel>) -> Self {
        ClassDomains(labels)
    }

    /// Fails if some class in `0..num_classes` is in neither set or in both.
    pub fn from_sets<'a>(
        seen: impl IntoIterator<Item = &'a usize>,
        unseen: impl IntoIterator<Item = &'a usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let mut out: Vec<Option<DomainLabel>> = vec![None; num_classes];
        for (set, label) in [(seen.into_iter().collect::<Vec<_>>(), DomainLabel::Seen), (unseen.into_iter().collect(), DomainLabel::Unseen)] {
            for &c in set {
                match out.get_mut(c) {
                    None => return Err(Error::Contract(format!("class {c} is outside 0..{num_classes}"))),
                    Some(Some(_)) => return Err(Error::Contract(format!("class {c} assigned to both domains"))),
                    Some(slot) => *slot = Some(label),
                }
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(c, d)| d.ok_or_else(|| Error::Contract(format!("class {c} has no domain assignment"))))
            .collect::<Result<Vec<_>>>()
            .map(ClassDomains)
    }

    pub fn of_dataset(ds: &Dataset) -> Result<Self> {
        Self::from_sets(&ds.seen_classes, &ds.unseen_classes, ds.num_classes())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<DomainLabel> {
        self.0.get(class).copied()
    }

    pub fn as_slice(&self) -> &[DomainLabel] {
        &self.0
    }

    pub fn classes_in(&self, d: DomainLabel) -> Vec<usize> {
        (0..self.0.len()).filter(|&c| self.0[c] == d).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub dc_hidden: usize,
    pub dc_epochs: usize,
    pub dc_lr: f64,
    pub batch_size: usize,
    /// Latent draws per unseen class semantic row.
    pub n_unseen_draws_per_class: usize,
    /// Latent draws per seen class semantic row, added to the sampled visual latents.
    pub n_seen_draws_per_class: usize,
    /// Upsample the smaller domain (with replacement) to the larger one's size.
    pub class_balance: bool,
    pub seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            dc_hidden: 64,
            dc_epochs: 30,
            dc_lr: 1e-3,
            batch_size: 64,
            n_unseen_draws_per_class: 200,
            n_seen_draws_per_class: 200,
            class_balance: true,
            seed: 0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_unseen_draws_per_class == 0 {
            return Err(Error::config("gate.n_unseen_draws_per_class", "must be at least 1"));
        }
        if self.dc_hidden == 0 || self.batch_size == 0 {
            return Err(Error::config("gate.dc_hidden", "hidden width and batch size must be at least 1"));
        }
        if !(self.dc_lr > 0.0 && self.dc_lr.is_finite()) {
            return Err(Error::config("gate.dc_lr", "must be positive"));
        }
        Ok(())
    }
}

/// Latent rows with their domain labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSet {
    pub latents: Tensor,
    pub labels: Vec<DomainLabel>,
}

impl DomainSet {
    pub fn new(latents: Tensor, labels: Vec<DomainLabel>) -> Result<Self> {
        if latents.rank() != 2 || latents.rows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} domain labels for latents of shape {:?}",
                labels.len(),
                latents.shape()
            )));
        }
        Ok(DomainSet { latents, labels })
    }

    pub fn count(&self, d: DomainLabel) -> usize {
        self.labels.iter().filter(|&&l| l == d).count()
    }

    pub fn flipped(&self) -> Self {
        DomainSet { latents: self.latents.clone(), labels: self.labels.iter().map(|l| l.flipped()).collect() }
    }
}

/// Resamples rows of the minority domain with replacement until both
/// domains have the same count.
pub fn balance_domains(set: &DomainSet, rng: &mut Rng) -> DomainSet {
    let seen: Vec<usize> = (0..set.labels.len()).filter(|&i| set.labels[i] == DomainLabel::Seen).collect();
    let unseen: Vec<usize> = (0..set.labels.len()).filter(|&i| set.labels[i] == DomainLabel::Unseen).collect();
    let (small, large) = if seen.len() < unseen.len() { (&seen, &unseen) } else { (&unseen, &seen) };
    if small.is_empty() || small.len() == large.len() {
        return set.clone();
    }
    let mut idx: Vec<usize> = (0..set.labels.len()).collect();
    idx.extend((0..large.len() - small.len()).map(|_| small[rng.below(small.len())]));
    DomainSet { latents: set.latents.select_rows(&idx), labels: idx.iter().map(|&i| set.labels[i]).collect() }
}

/// Seen domain: encoded training visuals of seen classes plus semantic draws
/// of seen classes. Unseen domain: semantic draws of unseen classes only.
pub fn build_dc_training_set(
    model: &dyn LatentModel,
    ds: &Dataset,
    split: &DomainSplit,
    cfg: &GateConfig,
) -> Result<DomainSet> {
    cfg.validate()?;
    if split.unseen.is_empty() {
        return Err(Error::Contract("domain classifier needs at least one unseen class".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let seen_visual = model.visual_draws(&ds.visual.select_rows(&split.train_idx), &mut rng)?;
    let seen_rows: Vec<usize> = split.seen.iter().copied().collect();
    let unseen_rows: Vec<usize> = split.unseen.iter().copied().collect();
    let seen_draws = model.semantic_draws(&ds.semantic.select_rows(&seen_rows), cfg.n_seen_draws_per_class, &mut rng)?;
    let unseen_draws =
        model.semantic_draws(&ds.semantic.select_rows(&unseen_rows), cfg.n_unseen_draws_per_class, &mut rng)?;
    let n_seen = seen_visual.rows() + seen_draws.rows();
    let mut labels = vec![DomainLabel::Seen; n_seen];
    labels.resize(n_seen + unseen_draws.rows(), DomainLabel::Unseen);
    let set = DomainSet::new(Tensor::vstack(&[seen_visual, seen_draws, unseen_draws])?, labels)?;
    Ok(if cfg.class_balance { balance_domains(&set, &mut rng) } else { set })
}

#[derive(Debug, Clone)]
pub struct DomainClassifier {
    pub store: ParamStore,
    pub mlp: Mlp,
    temperature: f64,
}

impl DomainClassifier {
    pub fn new(latent_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "dc", &[latent_dim, hidden, 2], Activation::Relu, Activation::Identity, rng);
        DomainClassifier { store, mlp, temperature: 1.0 }
    }

    pub fn from_checkpoint(ck: Checkpoint, temperature: f64) -> Result<Self> {
        let store = ck.into_store();
        let mlp = Mlp::from_store(&store, "dc", Activation::Relu, Activation::Identity)?;
        if mlp.out_dim() != 2 {
            return Err(Error::Integrity(format!("domain classifier has {} outputs, expected 2", mlp.out_dim())));
        }
        let mut dc = DomainClassifier { store, mlp, temperature: 1.0 };
        dc.set_temperature(temperature).map_err(|e| Error::Integrity(e.to_string()))?;
        Ok(dc)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Contract(format!("temperature must be positive and finite, got {t}")));
        }
        self.temperature = t;
        Ok(())
    }

    /// Raw (unscaled) N×2 logits.
    pub fn logits(&self, z: &Tensor) -> Result<Tensor> {
        z.expect_matrix("domain classifier", self.latent_dim())?;
        self.mlp.eval(&self.store, z)
    }

    pub fn save_temperature(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format!("{:.16e}\n", self.temperature)).map_err(|e| Error::io(path, e))
    }

    pub fn load_temperature(path: &Path) -> Result<f64> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: f64 = text
            .trim()
            .parse()
            .map_err(|_| Error::Integrity(format!("{}: not a number: {:?}", path.display(), text.trim())))?;
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Integrity(format!("{}: temperature {t} is not positive", path.display())));
        }
        Ok(t)
    }
}

/// Cross-entropy training on the two domain logits.
pub fn train_dc(set: &DomainSet, cfg: &GateConfig) -> Result<DomainClassifier> {
    cfg.validate()?;
    if set.count(DomainLabel::Seen) == 0 || set.count(DomainLabel::Unseen) == 0 {
        return Err(Error::Contract("domain classifier training set has only one domain".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut dc = DomainClassifier::new(set.latents.cols(), cfg.dc_hidden, &mut rng);
    let mut adam = Adam::new(&dc.store, dc.store.ids(), AdamConfig::with_lr(cfg.dc_lr));
    let targets: Vec<usize> = set.labels.iter().map(|l| l.index()).collect();
    let mut order: Vec<usize> = (0..set.labels.len()).collect();
    for epoch in 0..cfg.dc_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let y: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let mut g = Graph::new(&dc.store);
            let x = g.input(set.latents.select_rows(chunk));
            let grads = dc
                .mlp
                .forward(&mut g, x)
                .and_then(|l| g.cross_entropy(l, &y))
                .and_then(|l| g.backward(l))
                .map_err(|e| Error::Numeric(format!("domain classifier epoch {epoch}: {e}")))?;
            drop(g);
            dc.store.zero_grad();
            dc.store.accumulate(&grads);
            adam.step(&mut dc.store);
        }
    }
    dc.store.zero_grad();
    dc.store.round_to_f32();
    Ok(dc)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits / t)`.
pub fn temperature_nll(logits: &Tensor, labels: &[usize], t: f64) -> f64 {
    let n = labels.len().max(1) as f64;
    (0..labels.len())
        .map(|i| {
            let row: Vec<f64> = logits.row(i).iter().map(|v| v / t).collect();
            log_sum_exp(&row) - row[labels[i]]
        })
        .sum::<f64>()
        / n
}

pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);

/// Golden-section search for the NLL-minimising temperature over
/// [`TEMPERATURE_RANGE`], on a log scale. `None` when the labels contain a
/// single class or the set is empty.
pub fn fit_temperature_logits(logits: &Tensor, labels: &[usize]) -> Option<f64> {
    let first = *labels.first()?;
    if labels.iter().all(|&l| l == first) {
        return None;
    }
    let f = |log_t: f64| temperature_nll(logits, labels, log_t.exp());
    let (mut a, mut b) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-10 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    Some(((a + b) / 2.0).exp())
}

/// Fits the temperature on a validation set. A set with fewer than two
/// domains leaves the temperature at 1 and logs a warning.
pub fn calibrate(mut dc: DomainClassifier, validation: &DomainSet) -> Result<DomainClassifier> {
    let labels: Vec<usize> = validation.labels.iter().map(|l| l.index()).collect();
    let logits = dc.logits(&validation.latents)?;
    match fit_temperature_logits(&logits, &labels) {
        Some(t) => {
            log::info!("domain classifier temperature {t:.4}");
            let (lo, hi) = TEMPERATURE_RANGE;
            if (t / lo).ln() < 1e-3 || (hi / t).ln() < 1e-3 {
                log::warn!("temperature {t:.4} sits at the edge of [{lo}, {hi}]; the domain classifier barely separates the validation domains");
            }
            dc.set_temperature(t)?;
        }
        None => {
            log::warn!("calibration set lacks one of the domains; keeping temperature 1");
            dc.set_temperature(1.0)?;
        }
    }
    Ok(dc)
}

/// N×2 `(p_seen, p_unseen)` from temperature-scaled logits.
pub fn domain_prob(dc: &DomainClassifier, z: &Tensor) -> Result<Tensor> {
    let t = dc.temperature();
    Ok(softmax_rows(&dc.logits(z)?.map(|v| v / t)))
}

/// Gated class scores for one sample.
pub fn gate(p_class: &[f64], p_seen: f64, p_unseen: f64, domains: &ClassDomains) -> Result<Vec<f64>> {
    if p_class.len() > domains.len() {
        return Err(Error::Contract(format!("class {} has no domain assignment", domains.len())));
    }
    if p_class.len() < domains.len() {
        return Err(Error::Dimension {
            op: "gate",
            left: vec![p_class.len()],
            right: vec![domains.len()],
        });
    }
    Ok(p_class
        .iter()
        .zip(domains.as_slice())
        .map(|(&p, d)| match d {
            DomainLabel::Seen => p * p_seen,
            DomainLabel::Unseen => p * p_unseen,
        })
        .collect())
}

/// Row-wise [`gate`] of an N×C probability matrix with N×2 domain probabilities.
pub fn gate_rows(p_class: &Tensor, p_domain: &Tensor, domains: &ClassDomains) -> Result<Tensor> {
    p_domain.expect_matrix("gate domain probabilities", 2)?;
    if p_class.rows() != p_domain.rows() {
        return Err(Error::Dimension { op: "gate", left: p_class.shape().to_vec(), right: p_domain.shape().to_vec() });
    }
    let mut data = Vec::with_capacity(p_class.numel());
    for i in 0..p_class.rows() {
        let pd = p_domain.row(i);
        data.extend(gate(p_class.row(i), pd[0], pd[1], domains)?);
    }
    Tensor::matrix(p_class.rows(), domains.len(), data)
}
