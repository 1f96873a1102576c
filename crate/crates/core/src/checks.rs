//! Finite-difference checks of every training loss on small seeded models.
//!
//! Each check builds a toy instance from a seed, differentiates one named
//! loss with the graph and compares against central differences over all
//! parameters that the loss depends on.

use crate::autodiff::{gradcheck, GradcheckReport, Graph, NormalSource, ParamId, Rng, Tensor, Var, DEFAULT_EPS};
use crate::cada::{self, BatchNoise, CadaConfig, CadaModel, Distance, LossVars, LossWeights, PairedBatch};
use crate::cycle::{self, CycleConfig, CycleModel};
use crate::error::{Error, Result};
use crate::gate::DomainClassifier;
use crate::gzsl::ClassHead;

/// Largest relative error a check may report and still pass.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Epochs at which the weighted CADA total is checked: before any warm-up,
/// inside both ramps and after they have saturated.
pub const TOTAL_LOSS_EPOCHS: [usize; 4] = [0, 30, 80, 95];

pub const LOSS_NAMES: [&str; 13] = [
    "cada.recon",
    "cada.kl",
    "cada.cross",
    "cada.dist",
    "cada.total@0",
    "cada.total@30",
    "cada.total@80",
    "cada.total@95",
    "cycle.critic",
    "cycle.generator",
    "cycle.cycle",
    "head.cross_entropy",
    "dc.cross_entropy",
];

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub name: String,
    pub report: GradcheckReport,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE
    }

    pub fn line(&self) -> String {
        format!(
            "{:<20} {} max_rel_error={:.3e} over {} entries (worst {}[{}])",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.report.max_rel_error,
            self.report.entries,
            self.report.worst_param,
            self.report.worst_index
        )
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.standard_normal()).collect()).expect("shape")
}

const BATCH: usize = 5;

fn toy_cada(rng: &mut Rng) -> (CadaModel, PairedBatch, BatchNoise) {
    let cfg = CadaConfig {
        latent_dim: 2,
        enc_hidden_visual: 6,
        enc_hidden_semantic: 5,
        dec_hidden_visual: 6,
        dec_hidden_semantic: 5,
        ..CadaConfig::default()
    };
    let model = CadaModel::new(5, 3, &cfg, rng);
    let batch = PairedBatch::new(normal_matrix(BATCH, 5, rng), normal_matrix(BATCH, 3, rng)).expect("paired");
    let noise = BatchNoise::draw(BATCH, 2, rng);
    (model, batch, noise)
}

fn toy_cycle(rng: &mut Rng) -> (CycleModel, Tensor, Tensor, Tensor) {
    let cfg = CycleConfig { noise_dim: Some(2), gen_hidden: 5, critic_hidden: 4, ..CycleConfig::default() };
    let model = CycleModel::new(4, 3, &cfg, rng);
    let real = normal_matrix(BATCH, 4, rng).map(f64::abs);
    let semantic = normal_matrix(BATCH, 3, rng);
    let noise = normal_matrix(BATCH, 2, rng);
    (model, real, semantic, noise)
}

fn check_cada(seed: u64, pick: impl Fn(&LossVars) -> Var, epoch: usize) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let (mut model, batch, noise) = toy_cada(&mut rng);
    let weights = LossWeights::at_epoch(&CadaConfig::default(), epoch);
    let ids = model.store.ids();
    let shadow = model.clone();
    gradcheck(&mut model.store, &ids, DEFAULT_EPS, |g| {
        let vars = cada::loss_graph(g, &shadow, &batch, &noise, weights, Distance::L1)?;
        Ok(pick(&vars))
    })
}

fn check_cycle(seed: u64, which: &str) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let (mut model, real, semantic, noise) = toy_cycle(&mut rng);
    let shadow = model.clone();
    let ids: Vec<ParamId> = match which {
        "critic" => [model.critic_ids(), model.generator_ids()].concat(),
        "generator" => [model.generator_ids(), model.critic_ids()].concat(),
        _ => [model.generator_ids(), model.regressor_ids()].concat(),
    };
    let which = which.to_string();
    gradcheck(&mut model.store, &ids, DEFAULT_EPS, move |g: &mut Graph<'_>| {
        let a = g.input(semantic.clone());
        let z = g.input(noise.clone());
        let fake = cycle::generator_graph(g, &shadow, a, z)?;
        match which.as_str() {
            "critic" => {
                let x = g.input(real.clone());
                let r = cycle::critic_graph(g, &shadow, x, a)?;
                let f = cycle::critic_graph(g, &shadow, fake, a)?;
                cycle::critic_loss_graph(g, r, f)
            }
            "generator" => {
                let f = cycle::critic_graph(g, &shadow, fake, a)?;
                cycle::generator_loss_graph(g, f)
            }
            _ => {
                let regressed = shadow.regressor.forward(g, fake)?;
                cycle::cycle_loss_graph(g, a, regressed)
            }
        }
    })
}

fn check_head(seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let mut head = ClassHead::new(3, 4, Some(5), &mut rng);
    let z = normal_matrix(6, 3, &mut rng);
    let labels = [0, 1, 2, 3, 1, 2];
    let mlp = head.mlp.clone();
    let ids = head.store.ids();
    gradcheck(&mut head.store, &ids, DEFAULT_EPS, |g| {
        let x = g.input(z.clone());
        let logits = mlp.forward(g, x)?;
        g.cross_entropy(logits, &labels)
    })
}

fn check_dc(seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let mut dc = DomainClassifier::new(3, 4, &mut rng);
    let z = normal_matrix(6, 3, &mut rng);
    let labels = [0, 1, 0, 1, 1, 0];
    let mlp = dc.mlp.clone();
    let ids = dc.store.ids();
    gradcheck(&mut dc.store, &ids, DEFAULT_EPS, |g| {
        let x = g.input(z.clone());
        let logits = mlp.forward(g, x)?;
        g.cross_entropy(logits, &labels)
    })
}

/// Runs the named check on a toy instance derived from `seed`.
pub fn run_check(name: &str, seed: u64) -> Result<LossCheck> {
    let report = match name {
        "cada.recon" => check_cada(seed, |v| v.recon, 0)?,
        "cada.kl" => check_cada(seed, |v| v.kl, 0)?,
        "cada.cross" => check_cada(seed, |v| v.cross, 0)?,
        "cada.dist" => check_cada(seed, |v| v.dist, 0)?,
        "cycle.critic" => check_cycle(seed, "critic")?,
        "cycle.generator" => check_cycle(seed, "generator")?,
        "cycle.cycle" => check_cycle(seed, "cycle")?,
        "head.cross_entropy" => check_head(seed)?,
        "dc.cross_entropy" => check_dc(seed)?,
        other => match other.strip_prefix("cada.total@").and_then(|e| e.parse::<usize>().ok()) {
            Some(epoch) => check_cada(seed, |v| v.total, epoch)?,
            None => {
                return Err(Error::config("loss", format!("unknown loss {other:?}; known: {}", LOSS_NAMES.join(", "))))
            }
        },
    };
    Ok(LossCheck { name: name.to_string(), report })
}

/// Every named check, in order.
pub fn run_suite(seed: u64) -> Result<Vec<LossCheck>> {
    LOSS_NAMES.iter().map(|n| run_check(n, seed)).collect()
}
