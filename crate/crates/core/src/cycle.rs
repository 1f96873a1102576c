//! Cycle-consistent Wasserstein generator of visual features.
//!
//! The generator maps `semantic ⊕ noise` to a non-negative feature vector.
//! A critic scores `feature ⊕ semantic` pairs and is kept Lipschitz by
//! clipping its weights to `[-clip_c, clip_c]` after every update. A linear
//! regressor maps generated features back to the semantic row they were
//! conditioned on; its squared error is the cycle term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    clip_weights, Activation, Adam, AdamConfig, Checkpoint, Graph, Mlp, NormalSource, ParamId, ParamStore, Rng,
    Tensor, Var,
};
use crate::data::{Dataset, DomainSplit};
use crate::error::{Error, Result};
use crate::latent::History;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleConfig {
    /// Noise width; `None` uses the semantic dimension.
    pub noise_dim: Option<usize>,
    pub gen_hidden: usize,
    pub critic_hidden: usize,
    pub clip_c: f64,
    pub n_critic: usize,
    pub gamma_cyc: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub seed: u64,
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig {
            noise_dim: None,
            gen_hidden: 4096,
            critic_hidden: 4096,
            clip_c: 0.01,
            n_critic: 5,
            gamma_cyc: 10.0,
            epochs: 50,
            batch_size: 64,
            lr: 1e-4,
            adam_beta1: 0.5,
            seed: 0,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
            return Err(Error::config("cycle.clip_c", "must be positive"));
        }
        if self.n_critic == 0 {
            return Err(Error::config("cycle.n_critic", "must be at least 1"));
        }
        for (field, v) in [
            ("gen_hidden", self.gen_hidden),
            ("critic_hidden", self.critic_hidden),
            ("batch_size", self.batch_size),
            ("noise_dim", self.noise_dim.unwrap_or(1)),
        ] {
            if v == 0 {
                return Err(Error::config(format!("cycle.{field}"), "must be at least 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("cycle.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::config("cycle.adam_beta1", "must be in [0, 1)"));
        }
        if !(self.gamma_cyc >= 0.0 && self.gamma_cyc.is_finite()) {
            return Err(Error::config("cycle.gamma_cyc", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CycleModel {
    pub store: ParamStore,
    pub generator: Mlp,
    pub critic: Mlp,
    pub regressor: Mlp,
    pub noise_dim: usize,
}

impl CycleModel {
    pub fn new(visual_dim: usize, semantic_dim: usize, cfg: &CycleConfig, rng: &mut Rng) -> Self {
        let noise_dim = cfg.noise_dim.unwrap_or(semantic_dim);
        let mut store = ParamStore::new();
        let generator = Mlp::new(
            &mut store,
            "gen",
            &[semantic_dim + noise_dim, cfg.gen_hidden, visual_dim],
            Activation::leaky(),
            Activation::Relu,
            rng,
        );
        let critic = Mlp::new(
            &mut store,
            "critic",
            &[visual_dim + semantic_dim, cfg.critic_hidden, 1],
            Activation::leaky(),
            Activation::Identity,
            rng,
        );
        let regressor = Mlp::new(
            &mut store,
            "reg",
            &[visual_dim, semantic_dim],
            Activation::Identity,
            Activation::Identity,
            rng,
        );
        CycleModel { store, generator, critic, regressor, noise_dim }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let store = ck.into_store();
        let generator = Mlp::from_store(&store, "gen", Activation::leaky(), Activation::Relu)?;
        let critic = Mlp::from_store(&store, "critic", Activation::leaky(), Activation::Identity)?;
        let regressor = Mlp::from_store(&store, "reg", Activation::Identity, Activation::Identity)?;
        let (k, l) = (generator.out_dim(), regressor.out_dim());
        if regressor.in_dim() != k || critic.in_dim() != k + l || critic.out_dim() != 1 || generator.in_dim() <= l {
            return Err(Error::Integrity("cycle checkpoint has inconsistent layer sizes".into()));
        }
        let noise_dim = generator.in_dim() - l;
        Ok(CycleModel { store, generator, critic, regressor, noise_dim })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn visual_dim(&self) -> usize {
        self.generator.out_dim()
    }

    pub fn semantic_dim(&self) -> usize {
        self.regressor.out_dim()
    }

    pub fn critic_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("critic.")
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("gen.")
    }

    pub fn regressor_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("reg.")
    }
}

fn noise_matrix(rows: usize, cols: usize, rng: &mut impl NormalSource) -> Tensor {
    Tensor::from_parts(vec![rows, cols], (0..rows * cols).map(|_| rng.standard_normal()).collect())
}

// ---- graph-level terms ------------------------------------------------------

pub fn generator_graph(g: &mut Graph<'_>, model: &CycleModel, semantic: Var, noise: Var) -> Result<Var> {
    let input = g.concat_cols(semantic, noise)?;
    model.generator.forward(g, input)
}

pub fn critic_graph(g: &mut Graph<'_>, model: &CycleModel, features: Var, semantic: Var) -> Result<Var> {
    let input = g.concat_cols(features, semantic)?;
    model.critic.forward(g, input)
}

/// `−(mean critic(real) − mean critic(fake))`.
pub fn critic_loss_graph(g: &mut Graph<'_>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let r = g.mean(real_scores)?;
    let f = g.mean(fake_scores)?;
    g.sub(f, r)
}

/// `−mean critic(fake)`.
pub fn generator_loss_graph(g: &mut Graph<'_>, fake_scores: Var) -> Result<Var> {
    let f = g.mean(fake_scores)?;
    g.scale(f, -1.0)
}

/// Batch mean of `‖a − ã‖²`.
pub fn cycle_loss_graph(g: &mut Graph<'_>, semantic: Var, regressed: Var) -> Result<Var> {
    let d = g.sub(semantic, regressed)?;
    let s = g.square(d)?;
    g.batch_mean_of_sum(s)
}

/// Generator-side objective `generator_loss + γ·cycle_loss` for fixed noise.
pub fn generator_objective_graph(
    g: &mut Graph<'_>,
    model: &CycleModel,
    semantic: &Tensor,
    noise: &Tensor,
    gamma_cyc: f64,
) -> Result<(Var, Var, Var)> {
    let a = g.input(semantic.clone());
    let z = g.input(noise.clone());
    let fake = generator_graph(g, model, a, z)?;
    let scores = critic_graph(g, model, fake, a)?;
    let gen_loss = generator_loss_graph(g, scores)?;
    let regressed = model.regressor.forward(g, fake)?;
    let cyc = cycle_loss_graph(g, a, regressed)?;
    let weighted = g.scale(cyc, gamma_cyc)?;
    let total = g.add(gen_loss, weighted)?;
    Ok((total, gen_loss, cyc))
}

// ---- value-level operations -------------------------------------------------

/// One generated feature row per semantic row, each with fresh noise.
pub fn generate(model: &CycleModel, semantic_rows: &Tensor, rng: &mut impl NormalSource) -> Result<Tensor> {
    semantic_rows.expect_matrix("generate", model.semantic_dim())?;
    let noise = noise_matrix(semantic_rows.rows(), model.noise_dim, rng);
    let mut g = Graph::new(&model.store);
    let a = g.input(semantic_rows.clone());
    let z = g.input(noise);
    let out = generator_graph(&mut g, model, a, z)?;
    Ok(g.value(out).clone())
}

/// `n_per_class` generated rows for each class in `classes`, with labels.
pub fn synth_features(
    model: &CycleModel,
    semantic: &Tensor,
    classes: &[usize],
    n_per_class: usize,
    rng: &mut impl NormalSource,
) -> Result<(Tensor, Vec<usize>)> {
    let labels: Vec<usize> = classes.iter().flat_map(|&c| std::iter::repeat_n(c, n_per_class)).collect();
    if let Some(&c) = classes.iter().find(|&&c| c >= semantic.rows()) {
        return Err(Error::Contract(format!("class {c} has no semantic row")));
    }
    let feats = generate(model, &semantic.select_rows(&labels), rng)?;
    Ok((feats, labels))
}

pub fn critic_scores(model: &CycleModel, features: &Tensor, semantic: &Tensor) -> Result<Tensor> {
    if features.rows() != semantic.rows() {
        return Err(Error::Dimension {
            op: "critic",
            left: features.shape().to_vec(),
            right: semantic.shape().to_vec(),
        });
    }
    let mut g = Graph::new(&model.store);
    let x = g.input(features.clone());
    let a = g.input(semantic.clone());
    let s = critic_graph(&mut g, model, x, a)?;
    Ok(g.value(s).clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WganLosses {
    pub critic_loss: f64,
    pub generator_loss: f64,
}

/// Losses from precomputed critic outputs on real and fake batches.
pub fn wgan_losses(real_scores: &[f64], fake_scores: &[f64]) -> Result<WganLosses> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::Contract("critic losses need non-empty batches".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, f) = (mean(real_scores), mean(fake_scores));
    Ok(WganLosses { critic_loss: -(r - f), generator_loss: -f })
}

/// Evaluates the critic on both batches, each paired with `semantic`.
pub fn critic_losses(model: &CycleModel, real: &Tensor, fake: &Tensor, semantic: &Tensor) -> Result<WganLosses> {
    let r = critic_scores(model, real, semantic)?;
    let f = critic_scores(model, fake, semantic)?;
    wgan_losses(r.data(), f.data())
}

pub fn cycle_loss(semantic: &Tensor, regressed: &Tensor) -> Result<f64> {
    if semantic.shape() != regressed.shape() {
        return Err(Error::Dimension {
            op: "cycle loss",
            left: semantic.shape().to_vec(),
            right: regressed.shape().to_vec(),
        });
    }
    let rows = semantic.rows().max(1) as f64;
    let s: f64 = semantic.data().iter().zip(regressed.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / rows)
}

pub const HISTORY_COLUMNS: [&str; 3] = ["critic_loss", "generator_loss", "cycle_loss"];

/// Adversarial training. Every training batch drives one critic update
/// (followed by clipping) and one regressor update on the real features;
/// every `n_critic`-th batch is followed by one generator update on fresh
/// noise, where the regressor maps generated features back to semantics.
pub fn train_cycle(ds: &Dataset, split: &DomainSplit, cfg: &CycleConfig) -> Result<(CycleModel, History)> {
    cfg.validate()?;
    if let Some(&i) = split.train_idx.iter().find(|&&i| !split.seen.contains(&ds.labels[i])) {
        return Err(Error::Contract(format!("training sample {i} is not from a seen class")));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut model = CycleModel::new(ds.visual_dim(), ds.semantic_dim(), cfg, &mut rng);
    let critic_ids = model.critic_ids();
    let gen_ids = model.generator_ids();
    let reg_ids = model.regressor_ids();
    let adam_cfg = AdamConfig { lr: cfg.lr, beta1: cfg.adam_beta1, ..AdamConfig::default() };
    let mut critic_opt = Adam::new(&model.store, critic_ids.clone(), adam_cfg);
    let mut gen_opt = Adam::new(&model.store, gen_ids, adam_cfg);
    let mut reg_opt = Adam::new(&model.store, reg_ids, adam_cfg);
    clip_weights(&mut model.store, &critic_ids, cfg.clip_c)?;

    let mut history = History::new(&HISTORY_COLUMNS);
    let mut order = split.train_idx.clone();
    let mut critic_steps = 0usize;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let (mut c_sum, mut c_n, mut g_sum, mut y_sum, mut g_n) = (0.0, 0usize, 0.0, 0.0, 0usize);
        let diverged = |what: &str, e: Error| Error::Numeric(format!("cycle epoch {epoch}: {what}: {e}"));
        for chunk in order.chunks(cfg.batch_size) {
            let classes: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let semantic = ds.semantic.select_rows(&classes);
            let real = ds.visual.select_rows(chunk);
            let fake = generate(&model, &semantic, &mut rng).map_err(|e| diverged("generator", e))?;

            let mut g = Graph::new(&model.store);
            let (grads, loss) = (|| {
                let a = g.input(semantic.clone());
                let xr = g.input(real.clone());
                let xf = g.input(fake);
                let sr = critic_graph(&mut g, &model, xr, a)?;
                let sf = critic_graph(&mut g, &model, xf, a)?;
                let l = critic_loss_graph(&mut g, sr, sf)?;
                Ok::<_, Error>((g.backward(l)?, g.value(l).data()[0]))
            })()
            .map_err(|e| diverged("critic step", e))?;
            drop(g);
            model.store.zero_grad();
            model.store.accumulate(&grads);
            critic_opt.step(&mut model.store);
            clip_weights(&mut model.store, &critic_ids, cfg.clip_c)?;
            c_sum += loss;
            c_n += 1;
            critic_steps += 1;

            let mut g = Graph::new(&model.store);
            let grads = (|| {
                let a = g.input(semantic.clone());
                let x = g.input(real.clone());
                let r = model.regressor.forward(&mut g, x)?;
                let l = cycle_loss_graph(&mut g, a, r)?;
                g.backward(l)
            })()
            .map_err(|e| diverged("regressor step", e))?;
            drop(g);
            model.store.zero_grad();
            model.store.accumulate(&grads);
            reg_opt.step(&mut model.store);

            if critic_steps.is_multiple_of(cfg.n_critic) {
                let noise = noise_matrix(semantic.rows(), model.noise_dim, &mut rng);
                let mut g = Graph::new(&model.store);
                let (grads, gl, cl) = generator_objective_graph(&mut g, &model, &semantic, &noise, cfg.gamma_cyc)
                    .and_then(|(t, gl, cl)| Ok((g.backward(t)?, g.value(gl).data()[0], g.value(cl).data()[0])))
                    .map_err(|e| diverged("generator step", e))?;
                drop(g);
                model.store.zero_grad();
                model.store.accumulate(&grads);
                gen_opt.step(&mut model.store);
                g_sum += gl;
                y_sum += cl;
                g_n += 1;
            }
        }
        let avg = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
        let row = vec![avg(c_sum, c_n), avg(g_sum, g_n), avg(y_sum, g_n)];
        log::debug!("cycle epoch {epoch}: critic {:.5} gen {:.5} cycle {:.5}", row[0], row[1], row[2]);
        history.rows.push(row);
    }
    model.store.zero_grad();
    model.store.round_to_f32();
    // Rounding can push a clipped weight just past `clip_c`.
    let critic = model.critic_ids();
    clip_weights(&mut model.store, &critic, f32_at_most(cfg.clip_c))?;
    Ok((model, history))
}

/// Largest `f32` value that does not exceed `c`.
fn f32_at_most(c: f64) -> f64 {
    let f = c as f32;
    if f as f64 > c {
        f32::from_bits(f.to_bits() - 1) as f64
    } else {
        f as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ZeroNoise;

    fn tiny_cfg() -> CycleConfig {
        CycleConfig { gen_hidden: 8, critic_hidden: 8, epochs: 2, batch_size: 16, ..CycleConfig::default() }
    }

    #[test]
    fn wgan_sign_convention() {
        let l = wgan_losses(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l.critic_loss, -1.0);
        assert_eq!(l.generator_loss, -0.0);
        let same = wgan_losses(&[0.3, -0.2], &[0.3, -0.2]).unwrap();
        assert_eq!(same.critic_loss, 0.0);
        assert!(wgan_losses(&[], &[1.0]).is_err());
    }

    #[test]
    fn cycle_loss_examples() {
        let a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let z = Tensor::zeros(&[1, 2]);
        assert_eq!(cycle_loss(&a, &z).unwrap(), 1.0);
        assert_eq!(cycle_loss(&a, &a).unwrap(), 0.0);
        assert!(cycle_loss(&a, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn generated_features_are_nonnegative_and_counted() {
        let m = CycleModel::new(6, 3, &tiny_cfg(), &mut Rng::new(2));
        let sem = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 * 0.3 - 1.5).collect()).unwrap();
        let (x, labels) = synth_features(&m, &sem, &[0, 1, 2, 3], 10, &mut Rng::new(3)).unwrap();
        assert_eq!(x.shape(), &[40, 6]);
        assert_eq!(labels.iter().filter(|&&c| c == 2).count(), 10);
        assert!(x.data().iter().all(|&v| v >= 0.0));
        let (again, _) = synth_features(&m, &sem, &[0, 1, 2, 3], 10, &mut Rng::new(3)).unwrap();
        assert_eq!(x, again);
        let (e, l) = synth_features(&m, &sem, &[0, 1], 0, &mut ZeroNoise).unwrap();
        assert_eq!((e.rows(), l.len()), (0, 0));
        assert!(generate(&m, &Tensor::zeros(&[2, 5]), &mut ZeroNoise).is_err());
    }

    #[test]
    fn critic_losses_on_identical_batches() {
        let m = CycleModel::new(5, 2, &tiny_cfg(), &mut Rng::new(2));
        let x = Tensor::full(&[3, 5], 0.4);
        let a = Tensor::full(&[3, 2], -0.1);
        assert_eq!(critic_losses(&m, &x, &x, &a).unwrap().critic_loss, 0.0);
    }

    #[test]
    fn checkpoint_round_trip_and_names() {
        let cfg = CycleConfig { noise_dim: Some(4), ..tiny_cfg() };
        let m = CycleModel::new(5, 2, &cfg, &mut Rng::new(2));
        let back = CycleModel::from_checkpoint(Checkpoint::from_bytes(&m.checkpoint().to_bytes().unwrap()).unwrap())
            .unwrap();
        assert_eq!(back.noise_dim, 4);
        assert_eq!(back.visual_dim(), 5);
        assert!(m.store.iter().all(|p| ["gen.", "critic.", "reg."].iter().any(|s| p.name.starts_with(s))));
    }

    #[test]
    fn invalid_configs() {
        assert!(CycleConfig { clip_c: 0.0, ..tiny_cfg() }.validate().is_err());
        assert!(CycleConfig { n_critic: 0, ..tiny_cfg() }.validate().is_err());
    }
}
