//! Cross- and distribution-aligned variational autoencoder.
//!
//! Two Gaussian encoders (visual, semantic) share a latent space. Training
//! minimises
//!
//! ```text
//! recon + β(e)·kl + γ(e)·cross + δ(e)·dist
//! ```
//!
//! where `recon` is the within-modality L1 reconstruction, `cross` decodes
//! each modality from the other modality's latent sample, and `dist` pulls
//! the two posteriors together (squared mean gap plus squared gap of the
//! diagonal standard deviations). The weights ramp linearly per epoch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    Activation, Adam, AdamConfig, Checkpoint, DenseLayer, Graph, Mlp, NormalSource, ParamStore, Rng,
    Tensor, Var,
};
use crate::data::{Dataset, DomainSplit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Semantic,
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" | "x" => Ok(Modality::Visual),
            "semantic" | "a" => Ok(Modality::Semantic),
            other => Err(Error::Contract(format!("unknown modality `{other}`"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visual => "visual",
            Modality::Semantic => "semantic",
        })
    }
}

/// Linear warm-up: 0 before `start`, `rate·(epoch − start)` up to `end`,
/// then frozen at `rate·(end − start)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub rate: f64,
    pub start: usize,
    pub end: usize,
}

pub fn warmup_weight(schedule: &Schedule, epoch: usize) -> f64 {
    let Schedule { rate, start, end } = *schedule;
    if epoch < start {
        0.0
    } else {
        rate * (epoch.min(end) - start) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CadaConfig {
    pub latent_dim: usize,
    pub enc_hidden_visual: usize,
    pub enc_hidden_semantic: usize,
    pub dec_hidden_visual: usize,
    pub dec_hidden_semantic: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma_schedule: Schedule,
    pub delta_schedule: Schedule,
    pub kl_schedule: Schedule,
    pub cross_distance: Distance,
    pub seed: u64,
}

impl Default for CadaConfig {
    fn default() -> Self {
        CadaConfig {
            latent_dim: 64,
            enc_hidden_visual: 1560,
            enc_hidden_semantic: 1450,
            dec_hidden_visual: 1560,
            dec_hidden_semantic: 660,
            epochs: 100,
            batch_size: 52,
            lr: 1.5e-3,
            gamma_schedule: Schedule { rate: 0.044, start: 21, end: 75 },
            delta_schedule: Schedule { rate: 0.0026, start: 0, end: 90 },
            kl_schedule: Schedule { rate: 0.0026, start: 0, end: 90 },
            cross_distance: Distance::L1,
            seed: 0,
        }
    }
}

impl CadaConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent_dim", self.latent_dim),
            ("enc_hidden_visual", self.enc_hidden_visual),
            ("enc_hidden_semantic", self.enc_hidden_semantic),
            ("dec_hidden_visual", self.dec_hidden_visual),
            ("dec_hidden_semantic", self.dec_hidden_semantic),
            ("batch_size", self.batch_size),
        ];
        for (field, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("cada.{field}"), "must be at least 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("cada.lr", "must be positive"));
        }
        for (field, s) in [
            ("gamma_schedule", &self.gamma_schedule),
            ("delta_schedule", &self.delta_schedule),
            ("kl_schedule", &self.kl_schedule),
        ] {
            if s.start >= s.end {
                return Err(Error::config(format!("cada.{field}"), "start must be before end"));
            }
            if !(s.rate >= 0.0 && s.rate.is_finite()) {
                return Err(Error::config(format!("cada.{field}.rate"), "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Per-sample diagonal Gaussian posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl GaussianLatent {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(Error::Dimension {
                op: "gaussian latent",
                left: mu.shape().to_vec(),
                right: log_var.shape().to_vec(),
            });
        }
        Ok(GaussianLatent { mu, log_var })
    }
}

/// `input → hidden(relu) → (mu, log_var)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEncoder {
    pub hidden: DenseLayer,
    pub mu: DenseLayer,
    pub log_var: DenseLayer,
}

impl GaussianEncoder {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, latent: usize, rng: &mut Rng) -> Self {
        GaussianEncoder {
            hidden: DenseLayer::new(store, &format!("{name}.hidden"), input, hidden, Activation::Relu, rng),
            mu: DenseLayer::new(store, &format!("{name}.mu"), hidden, latent, Activation::Identity, rng),
            log_var: DenseLayer::new(store, &format!("{name}.log_var"), hidden, latent, Activation::Identity, rng),
        }
    }

    fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(GaussianEncoder {
            hidden: DenseLayer::from_store(store, &format!("{name}.hidden"), Activation::Relu)?,
            mu: DenseLayer::from_store(store, &format!("{name}.mu"), Activation::Identity)?,
            log_var: DenseLayer::from_store(store, &format!("{name}.log_var"), Activation::Identity)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(g, x)?;
        Ok((self.mu.forward(g, h)?, self.log_var.forward(g, h)?))
    }
}

#[derive(Debug, Clone)]
pub struct CadaModel {
    pub store: ParamStore,
    pub enc_visual: GaussianEncoder,
    pub enc_semantic: GaussianEncoder,
    pub dec_visual: Mlp,
    pub dec_semantic: Mlp,
}

impl CadaModel {
    pub fn new(visual_dim: usize, semantic_dim: usize, cfg: &CadaConfig, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let z = cfg.latent_dim;
        let enc_visual = GaussianEncoder::new(&mut store, "enc_x", visual_dim, cfg.enc_hidden_visual, z, rng);
        let enc_semantic = GaussianEncoder::new(&mut store, "enc_a", semantic_dim, cfg.enc_hidden_semantic, z, rng);
        let dec_visual = Mlp::new(
            &mut store,
            "dec_x",
            &[z, cfg.dec_hidden_visual, visual_dim],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        let dec_semantic = Mlp::new(
            &mut store,
            "dec_a",
            &[z, cfg.dec_hidden_semantic, semantic_dim],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        CadaModel { store, enc_visual, enc_semantic, dec_visual, dec_semantic }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let store = ck.into_store();
        let enc_visual = GaussianEncoder::from_store(&store, "enc_x")?;
        let enc_semantic = GaussianEncoder::from_store(&store, "enc_a")?;
        let dec_visual = Mlp::from_store(&store, "dec_x", Activation::Relu, Activation::Identity)?;
        let dec_semantic = Mlp::from_store(&store, "dec_a", Activation::Relu, Activation::Identity)?;
        let z = enc_visual.mu.out_dim;
        if enc_semantic.mu.out_dim != z || dec_visual.in_dim() != z || dec_semantic.in_dim() != z {
            return Err(Error::Integrity("cada checkpoint has inconsistent latent sizes".into()));
        }
        if dec_visual.out_dim() != enc_visual.hidden.in_dim
            || dec_semantic.out_dim() != enc_semantic.hidden.in_dim
        {
            return Err(Error::Integrity("cada decoders do not match encoder inputs".into()));
        }
        Ok(CadaModel { store, enc_visual, enc_semantic, dec_visual, dec_semantic })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_visual.mu.out_dim
    }

    pub fn visual_dim(&self) -> usize {
        self.enc_visual.hidden.in_dim
    }

    pub fn semantic_dim(&self) -> usize {
        self.enc_semantic.hidden.in_dim
    }

    fn encoder(&self, m: Modality) -> &GaussianEncoder {
        match m {
            Modality::Visual => &self.enc_visual,
            Modality::Semantic => &self.enc_semantic,
        }
    }

    fn decoder(&self, m: Modality) -> &Mlp {
        match m {
            Modality::Visual => &self.dec_visual,
            Modality::Semantic => &self.dec_semantic,
        }
    }

    fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.visual_dim(),
            Modality::Semantic => self.semantic_dim(),
        }
    }
}

/// Visual rows paired row-by-row with the semantic row of their class.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub visual: Tensor,
    pub semantic: Tensor,
}

impl PairedBatch {
    pub fn new(visual: Tensor, semantic: Tensor) -> Result<Self> {
        if visual.rows() != semantic.rows() || visual.rank() != 2 || semantic.rank() != 2 {
            return Err(Error::Contract(format!(
                "unpaired batch: {:?} visual rows vs {:?} semantic rows",
                visual.shape(),
                semantic.shape()
            )));
        }
        Ok(PairedBatch { visual, semantic })
    }

    /// Pairs each selected sample with its class's semantic row.
    pub fn from_indices(ds: &Dataset, idx: &[usize]) -> Self {
        let classes: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        PairedBatch {
            visual: ds.visual.select_rows(idx),
            semantic: ds.semantic.select_rows(&classes),
        }
    }

    pub fn len(&self) -> usize {
        self.visual.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Standard-normal draws for both modalities' reparameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNoise {
    pub visual: Tensor,
    pub semantic: Tensor,
}

impl BatchNoise {
    pub fn draw(rows: usize, latent_dim: usize, noise: &mut impl NormalSource) -> Self {
        let mut draw = || {
            let data = (0..rows * latent_dim).map(|_| noise.standard_normal()).collect();
            Tensor::from_parts(vec![rows, latent_dim], data)
        };
        let visual = draw();
        let semantic = draw();
        BatchNoise { visual, semantic }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub cross: f64,
    pub dist: f64,
    pub weighted_total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 5] = ["recon", "kl", "cross", "dist", "weighted_total"];

    pub fn values(&self) -> [f64; 5] {
        [self.recon, self.kl, self.cross, self.dist, self.weighted_total]
    }
}

// ---- graph-level terms ------------------------------------------------------

pub(crate) fn reparam_graph(g: &mut Graph<'_>, mu: Var, log_var: Var, eps: &Tensor) -> Result<Var> {
    let half = g.scale(log_var, 0.5)?;
    let sigma = g.exp(half)?;
    let e = g.input(eps.clone());
    let noise = g.mul(sigma, e)?;
    g.add(mu, noise)
}

/// Batch mean of `½ Σ_d (μ² + σ² − 1 − log σ²)`.
pub(crate) fn kl_graph(g: &mut Graph<'_>, mu: Var, log_var: Var) -> Result<Var> {
    let latent = g.value(mu).cols() as f64;
    let mu2 = g.square(mu)?;
    let var = g.exp(log_var)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, log_var)?;
    let s = g.batch_mean_of_sum(b)?;
    let half = g.scale(s, 0.5)?;
    g.add_scalar(half, -0.5 * latent)
}

/// Batch mean of the per-row L1 (or squared L2) distance.
pub(crate) fn distance_graph(g: &mut Graph<'_>, a: Var, b: Var, kind: Distance) -> Result<Var> {
    let d = g.sub(a, b)?;
    let e = match kind {
        Distance::L1 => g.abs(d)?,
        Distance::L2 => g.square(d)?,
    };
    g.batch_mean_of_sum(e)
}

/// Batch mean of `‖μ₁ − μ₂‖² + ‖σ₁ − σ₂‖²` for diagonal Gaussians.
pub(crate) fn dist_graph(g: &mut Graph<'_>, mu1: Var, lv1: Var, mu2: Var, lv2: Var) -> Result<Var> {
    let dm = g.sub(mu1, mu2)?;
    let dm2 = g.square(dm)?;
    let h1 = g.scale(lv1, 0.5)?;
    let s1 = g.exp(h1)?;
    let h2 = g.scale(lv2, 0.5)?;
    let s2 = g.exp(h2)?;
    let ds = g.sub(s1, s2)?;
    let ds2 = g.square(ds)?;
    let t = g.add(dm2, ds2)?;
    g.batch_mean_of_sum(t)
}

/// Handles to every term of the loss inside one graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub recon: Var,
    pub kl: Var,
    pub cross: Var,
    pub dist: Var,
    pub total: Var,
}

/// Loss weights for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl LossWeights {
    pub fn at_epoch(cfg: &CadaConfig, epoch: usize) -> Self {
        LossWeights {
            beta: warmup_weight(&cfg.kl_schedule, epoch),
            gamma: warmup_weight(&cfg.gamma_schedule, epoch),
            delta: warmup_weight(&cfg.delta_schedule, epoch),
        }
    }
}

pub fn loss_graph(
    g: &mut Graph<'_>,
    model: &CadaModel,
    batch: &PairedBatch,
    noise: &BatchNoise,
    weights: LossWeights,
    cross_distance: Distance,
) -> Result<LossVars> {
    batch.visual.expect_matrix("cada visual batch", model.visual_dim())?;
    batch.semantic.expect_matrix("cada semantic batch", model.semantic_dim())?;
    let x = g.input(batch.visual.clone());
    let a = g.input(batch.semantic.clone());
    let (mu_x, lv_x) = model.enc_visual.forward(g, x)?;
    let (mu_a, lv_a) = model.enc_semantic.forward(g, a)?;
    let z_x = reparam_graph(g, mu_x, lv_x, &noise.visual)?;
    let z_a = reparam_graph(g, mu_a, lv_a, &noise.semantic)?;

    let x_rec = model.dec_visual.forward(g, z_x)?;
    let a_rec = model.dec_semantic.forward(g, z_a)?;
    let r1 = distance_graph(g, x, x_rec, Distance::L1)?;
    let r2 = distance_graph(g, a, a_rec, Distance::L1)?;
    let recon = g.add(r1, r2)?;

    let k1 = kl_graph(g, mu_x, lv_x)?;
    let k2 = kl_graph(g, mu_a, lv_a)?;
    let kl = g.add(k1, k2)?;

    let x_from_a = model.dec_visual.forward(g, z_a)?;
    let a_from_x = model.dec_semantic.forward(g, z_x)?;
    let c1 = distance_graph(g, x, x_from_a, cross_distance)?;
    let c2 = distance_graph(g, a, a_from_x, cross_distance)?;
    let cross = g.add(c1, c2)?;

    let dist = dist_graph(g, mu_x, lv_x, mu_a, lv_a)?;

    let wk = g.scale(kl, weights.beta)?;
    let wc = g.scale(cross, weights.gamma)?;
    let wd = g.scale(dist, weights.delta)?;
    let t1 = g.add(recon, wk)?;
    let t2 = g.add(t1, wc)?;
    let total = g.add(t2, wd)?;
    Ok(LossVars { recon, kl, cross, dist, total })
}

// ---- value-level operations -------------------------------------------------

pub fn encode(model: &CadaModel, modality: Modality, inputs: &Tensor) -> Result<GaussianLatent> {
    inputs.expect_matrix("encode", model.input_dim(modality))?;
    let mut g = Graph::new(&model.store);
    let x = g.input(inputs.clone());
    let (mu, lv) = model.encoder(modality).forward(&mut g, x)?;
    GaussianLatent::new(g.value(mu).clone(), g.value(lv).clone())
}

pub fn decode(model: &CadaModel, modality: Modality, z: &Tensor) -> Result<Tensor> {
    z.expect_matrix("decode", model.latent_dim())?;
    model.decoder(modality).eval(&model.store, z)
}

/// `mu + exp(log_var / 2) ⊙ ε` with `ε` from `noise`.
pub fn reparameterize(latent: &GaussianLatent, noise: &mut impl NormalSource) -> Tensor {
    let data = latent
        .mu
        .data()
        .iter()
        .zip(latent.log_var.data())
        .map(|(m, lv)| m + (0.5 * lv).exp() * noise.standard_normal())
        .collect();
    Tensor::from_parts(latent.mu.shape().to_vec(), data)
}

pub fn kl_term(latent: &GaussianLatent) -> f64 {
    let rows = latent.mu.rows().max(1) as f64;
    let s: f64 = latent
        .mu
        .data()
        .iter()
        .zip(latent.log_var.data())
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum();
    0.5 * s / rows
}

pub fn distribution_alignment_loss(a: &GaussianLatent, b: &GaussianLatent) -> Result<f64> {
    if a.mu.shape() != b.mu.shape() {
        return Err(Error::Dimension {
            op: "distribution alignment",
            left: a.mu.shape().to_vec(),
            right: b.mu.shape().to_vec(),
        });
    }
    let rows = a.mu.rows().max(1) as f64;
    let mut s = 0.0;
    for i in 0..a.mu.numel() {
        let dm = a.mu.data()[i] - b.mu.data()[i];
        let ds = (0.5 * a.log_var.data()[i]).exp() - (0.5 * b.log_var.data()[i]).exp();
        s += dm * dm + ds * ds;
    }
    Ok(s / rows)
}

/// Cross-reconstruction error in both directions for fixed noise.
pub fn cross_alignment_loss(
    model: &CadaModel,
    batch: &PairedBatch,
    noise: &BatchNoise,
    distance: Distance,
) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let vars = loss_graph(
        &mut g,
        model,
        batch,
        noise,
        LossWeights { beta: 0.0, gamma: 0.0, delta: 0.0 },
        distance,
    )?;
    g.value(vars.cross).item()
}

pub fn total_loss(
    model: &CadaModel,
    batch: &PairedBatch,
    epoch: usize,
    cfg: &CadaConfig,
    noise: &BatchNoise,
) -> Result<LossBreakdown> {
    let mut g = Graph::new(&model.store);
    let v = loss_graph(&mut g, model, batch, noise, LossWeights::at_epoch(cfg, epoch), cfg.cross_distance)?;
    Ok(LossBreakdown {
        recon: g.value(v.recon).item()?,
        kl: g.value(v.kl).item()?,
        cross: g.value(v.cross).item()?,
        dist: g.value(v.dist).item()?,
        weighted_total: g.value(v.total).item()?,
    })
}

/// Reparameterized draws, `n_per_input` consecutive rows per input row.
/// Returns the draws and, for each, the index of its source row.
pub fn sample_latents(
    model: &CadaModel,
    modality: Modality,
    inputs: &Tensor,
    n_per_input: usize,
    noise: &mut impl NormalSource,
) -> Result<(Tensor, Vec<usize>)> {
    let latent = encode(model, modality, inputs)?;
    let z = latent.mu.cols();
    let mut data = Vec::with_capacity(inputs.rows() * n_per_input * z);
    let mut source = Vec::with_capacity(inputs.rows() * n_per_input);
    for i in 0..inputs.rows() {
        let mu = latent.mu.row(i);
        let lv = latent.log_var.row(i);
        for _ in 0..n_per_input {
            for d in 0..z {
                data.push(mu[d] + (0.5 * lv[d]).exp() * noise.standard_normal());
            }
            source.push(i);
        }
    }
    Ok((Tensor::from_parts(vec![source.len(), z], data), source))
}

/// Trains on the split's training samples, each paired with its class's
/// semantic row. Returns the model and one averaged breakdown per epoch.
pub fn train_cada(ds: &Dataset, split: &DomainSplit, cfg: &CadaConfig) -> Result<(CadaModel, Vec<LossBreakdown>)> {
    cfg.validate()?;
    if let Some(&i) = split.train_idx.iter().find(|&&i| !split.seen.contains(&ds.labels[i])) {
        return Err(Error::Contract(format!(
            "training sample {i} is not from a seen class"
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut model = CadaModel::new(ds.visual_dim(), ds.semantic_dim(), cfg, &mut rng);
    let mut adam = Adam::new(&model.store, model.store.ids(), AdamConfig::with_lr(cfg.lr));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = split.train_idx.clone();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let weights = LossWeights::at_epoch(cfg, epoch);
        let mut sums = [0.0; 5];
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = PairedBatch::from_indices(ds, chunk);
            let noise = BatchNoise::draw(chunk.len(), cfg.latent_dim, &mut rng);
            let mut g = Graph::new(&model.store);
            let (grads, values) = loss_graph(&mut g, &model, &batch, &noise, weights, cfg.cross_distance)
                .and_then(|v| {
                    let grads = g.backward(v.total)?;
                    let vals = [v.recon, v.kl, v.cross, v.dist, v.total].map(|x| g.value(x).data()[0]);
                    Ok((grads, vals))
                })
                .map_err(|e| Error::Numeric(format!("cada epoch {epoch} batch {b}: {e}")))?;
            drop(g);
            model.store.zero_grad();
            model.store.accumulate(&grads);
            adam.step(&mut model.store);
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * chunk.len() as f64;
            }
        }
        let n = order.len().max(1) as f64;
        let [recon, kl, cross, dist, weighted_total] = sums.map(|s| s / n);
        log::debug!("cada epoch {epoch}: total {weighted_total:.5} recon {recon:.5} cross {cross:.5}");
        history.push(LossBreakdown { recon, kl, cross, dist, weighted_total });
    }
    model.store.round_to_f32();
    Ok((model, history))
}
