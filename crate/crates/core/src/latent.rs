//! Common interface over latent model families and the by-name registry.
//!
//! A family knows how to train a model from a dataset and how to restore one
//! from a checkpoint. A trained model maps visual rows to deterministic
//! latents and semantic rows to stochastic latents; everything downstream
//! (class head, domain classifier, evaluation) works only through this trait.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Rng, Tensor, ZeroNoise};
use crate::cada::{self, CadaConfig, CadaModel, Modality};
use crate::cycle::{self, CycleConfig, CycleModel};
use crate::data::{Dataset, DomainSplit};
use crate::error::{Error, Result};

pub trait LatentModel: Send + Sync + std::fmt::Debug {
    fn family(&self) -> &'static str;
    fn latent_dim(&self) -> usize;
    fn visual_dim(&self) -> usize;
    fn semantic_dim(&self) -> usize;
    /// Deterministic latent of each visual row (no sampling).
    fn embed_visual(&self, visual: &Tensor) -> Result<Tensor>;
    /// `n_per_row` stochastic latents per semantic row, grouped by row.
    fn semantic_draws(&self, semantic: &Tensor, n_per_row: usize, rng: &mut Rng) -> Result<Tensor>;
    /// One stochastic latent per visual row. Families with a deterministic
    /// visual embedding return that embedding.
    fn visual_draws(&self, visual: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        self.embed_visual(visual)
    }
    fn checkpoint(&self) -> Checkpoint;
}

/// Per-epoch training curves, written as CSV next to checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl History {
    pub fn new(columns: &[&str]) -> Self {
        History { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (e, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{e}");
            for v in row {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Configuration for every registered family; each family reads its own.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfigs {
    pub cada: CadaConfig,
    pub cycle: CycleConfig,
}

pub trait LatentFamily: Sync {
    fn name(&self) -> &'static str;
    fn train(&self, ds: &Dataset, split: &DomainSplit, cfg: &LatentConfigs) -> Result<(Box<dyn LatentModel>, History)>;
    fn load(&self, ck: Checkpoint) -> Result<Box<dyn LatentModel>>;
}

static REGISTRY: [&dyn LatentFamily; 2] = [&CadaFamily, &CycleFamily];

pub fn registry() -> &'static [&'static dyn LatentFamily] {
    &REGISTRY
}

pub fn family_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|f| f.name()).collect()
}

pub fn lookup(name: &str) -> Result<&'static dyn LatentFamily> {
    REGISTRY.iter().copied().find(|f| f.name() == name).ok_or_else(|| {
        Error::config("family", format!("unknown family `{name}` (known: {})", family_names().join(", ")))
    })
}

// ---- cada -------------------------------------------------------------------

pub struct CadaFamily;

impl LatentModel for CadaModel {
    fn family(&self) -> &'static str {
        "cada"
    }

    fn latent_dim(&self) -> usize {
        CadaModel::latent_dim(self)
    }

    fn visual_dim(&self) -> usize {
        CadaModel::visual_dim(self)
    }

    fn semantic_dim(&self) -> usize {
        CadaModel::semantic_dim(self)
    }

    fn embed_visual(&self, visual: &Tensor) -> Result<Tensor> {
        cada::sample_latents(self, Modality::Visual, visual, 1, &mut ZeroNoise).map(|(z, _)| z)
    }

    fn semantic_draws(&self, semantic: &Tensor, n_per_row: usize, rng: &mut Rng) -> Result<Tensor> {
        cada::sample_latents(self, Modality::Semantic, semantic, n_per_row, rng).map(|(z, _)| z)
    }

    fn visual_draws(&self, visual: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        cada::sample_latents(self, Modality::Visual, visual, 1, rng).map(|(z, _)| z)
    }

    fn checkpoint(&self) -> Checkpoint {
        CadaModel::checkpoint(self)
    }
}

impl LatentFamily for CadaFamily {
    fn name(&self) -> &'static str {
        "cada"
    }

    fn train(&self, ds: &Dataset, split: &DomainSplit, cfg: &LatentConfigs) -> Result<(Box<dyn LatentModel>, History)> {
        let (model, losses) = cada::train_cada(ds, split, &cfg.cada)?;
        let mut history = History::new(&cada::LossBreakdown::COLUMNS);
        history.rows = losses.iter().map(|l| l.values().to_vec()).collect();
        Ok((Box::new(model), history))
    }

    fn load(&self, ck: Checkpoint) -> Result<Box<dyn LatentModel>> {
        Ok(Box::new(CadaModel::from_checkpoint(ck)?))
    }
}

// ---- cycle ------------------------------------------------------------------

pub struct CycleFamily;

impl LatentModel for CycleModel {
    fn family(&self) -> &'static str {
        "cycle"
    }

    /// Visual space itself serves as the latent space.
    fn latent_dim(&self) -> usize {
        self.visual_dim()
    }

    fn visual_dim(&self) -> usize {
        CycleModel::visual_dim(self)
    }

    fn semantic_dim(&self) -> usize {
        CycleModel::semantic_dim(self)
    }

    fn embed_visual(&self, visual: &Tensor) -> Result<Tensor> {
        visual.expect_matrix("cycle embed", self.visual_dim())?;
        Ok(visual.clone())
    }

    fn semantic_draws(&self, semantic: &Tensor, n_per_row: usize, rng: &mut Rng) -> Result<Tensor> {
        semantic.expect_matrix("cycle draws", self.semantic_dim())?;
        let rows: Vec<usize> = (0..semantic.rows()).flat_map(|r| std::iter::repeat_n(r, n_per_row)).collect();
        cycle::generate(self, &semantic.select_rows(&rows), rng)
    }

    fn checkpoint(&self) -> Checkpoint {
        CycleModel::checkpoint(self)
    }
}

impl LatentFamily for CycleFamily {
    fn name(&self) -> &'static str {
        "cycle"
    }

    fn train(&self, ds: &Dataset, split: &DomainSplit, cfg: &LatentConfigs) -> Result<(Box<dyn LatentModel>, History)> {
        let (model, history) = cycle::train_cycle(ds, split, &cfg.cycle)?;
        Ok((Box::new(model), history))
    }

    fn load(&self, ck: Checkpoint) -> Result<Box<dyn LatentModel>> {
        Ok(Box::new(CycleModel::from_checkpoint(ck)?))
    }
}
