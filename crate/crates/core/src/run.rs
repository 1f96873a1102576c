//! Run configuration and the train/eval/synth drivers behind the CLI.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Rng, Tensor};
use crate::cada::CadaConfig;
use crate::cycle::CycleConfig;
use crate::data::{load_dataset, save_dataset, synth_benchmark, Dataset, DomainSplit, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::gate::{build_dc_training_set, calibrate, train_dc, ClassDomains, DomainLabel, DomainSet, GateConfig};
use crate::gzsl::{build_head_training_set, train_head, HeadConfig, Pipeline, PredictionMode};
use crate::latent::{self, History, LatentConfigs, LatentFamily};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const DEFAULT_GRID_POINTS: usize = 201;

fn default_family() -> String {
    "cada".into()
}

fn default_true() -> bool {
    true
}

fn default_mode() -> PredictionMode {
    PredictionMode::GzslWithDc
}

fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}

/// Everything needed to reproduce a training run. Exactly one of `dataset`
/// and `synth` must be set; `seed` is required. Module `seed` fields are
/// overwritten with values derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: PredictionMode,
    /// Fit the domain classifier's temperature on held-out classes.
    #[serde(default = "default_true")]
    pub calibrate: bool,
    #[serde(default)]
    pub l2_normalize: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub cada: CadaConfig,
    #[serde(default)]
    pub cycle: CycleConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub head: HeadConfig,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        RunConfig {
            family: default_family(),
            dataset: None,
            synth: None,
            seed,
            mode: default_mode(),
            calibrate: true,
            l2_normalize: false,
            out_dir: None,
            grid_points: DEFAULT_GRID_POINTS,
            cada: CadaConfig::default(),
            cycle: CycleConfig::default(),
            gate: GateConfig::default(),
            head: HeadConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("config")
                .to_string();
            Error::config(field, msg)
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn uses_dc(&self) -> bool {
        self.mode == PredictionMode::GzslWithDc
    }

    pub fn validate(&self) -> Result<()> {
        latent::lookup(&self.family)?;
        match (&self.dataset, &self.synth) {
            (Some(_), Some(_)) => return Err(Error::config("dataset", "set either `dataset` or `synth`, not both")),
            (None, None) => return Err(Error::config("dataset", "one of `dataset` or `synth` is required")),
            (None, Some(s)) => s.validate().map_err(|e| prefix_field(e, "synth"))?,
            (Some(_), None) => {}
        }
        if self.grid_points == 0 {
            return Err(Error::config("grid_points", "must be at least 1"));
        }
        self.cada.validate()?;
        self.cycle.validate()?;
        self.gate.validate()?;
        self.head.validate()
    }

    /// Validated copy with every module seed derived from the run seed.
    pub fn resolved(&self) -> Result<Self> {
        self.validate()?;
        let mut cfg = self.clone();
        let mut rng = Rng::new(self.seed);
        cfg.cada.seed = rng.next_u64();
        cfg.cycle.seed = rng.next_u64();
        cfg.gate.seed = rng.next_u64();
        cfg.head.seed = rng.next_u64();
        Ok(cfg)
    }

    fn calibration_seed(&self) -> u64 {
        Rng::new(self.seed ^ 0x5EED_CA1B).next_u64()
    }

    fn latent_configs(&self) -> LatentConfigs {
        LatentConfigs { cada: self.cada.clone(), cycle: self.cycle.clone() }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut ds = match (&self.dataset, &self.synth) {
            (Some(p), None) => load_dataset(p)?,
            (None, Some(s)) => synth_benchmark(s)?,
            _ => return Err(Error::config("dataset", "one of `dataset` or `synth` is required")),
        };
        if self.l2_normalize {
            ds.l2_normalize_visual();
        }
        Ok(ds)
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { field, msg } => Error::config(format!("{prefix}.{field}"), msg),
        other => other,
    }
}

/// What one training run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub pipeline: Pipeline,
    pub history: History,
    /// Temperature fitted in the calibration pass, if one ran.
    pub temperature: Option<f64>,
}

/// Splits used by the calibration pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSplit {
    /// Seen classes minus the validation classes, with held-out samples removed.
    pub split: DomainSplit,
    /// Training samples of the remaining seen classes kept out of training.
    pub held_out_seen: Vec<usize>,
    /// Training samples of the validation classes, treated as unseen.
    pub pseudo_unseen: Vec<usize>,
}

/// Treats `val` as unseen and holds out a fifth of each remaining seen
/// class's training samples (at least one when the class has two or more).
pub fn calibration_split(ds: &Dataset, val: &BTreeSet<usize>, seed: u64) -> CalibrationSplit {
    let mut rng = Rng::new(seed);
    let seen: BTreeSet<usize> = ds.seen_classes.difference(val).copied().collect();
    let mut unseen = ds.unseen_classes.clone();
    unseen.extend(val.iter().copied());
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for &c in &seen {
        let mut idx: Vec<usize> = ds.train_idx.iter().copied().filter(|&i| ds.labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let k = if idx.len() >= 2 { ((idx.len() as f64 * 0.2).round() as usize).max(1) } else { 0 };
        held_out.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    held_out.sort_unstable();
    let pseudo_unseen = ds.train_idx.iter().copied().filter(|&i| val.contains(&ds.labels[i])).collect();
    CalibrationSplit { split: DomainSplit { train_idx: train, seen, unseen }, held_out_seen: held_out, pseudo_unseen }
}

/// Trains a latent model and domain classifier with the validation classes
/// as pseudo-unseen, then fits the temperature on held-out seen samples and
/// the validation classes' samples.
pub fn calibration_pass(family: &dyn LatentFamily, ds: &Dataset, cfg: &RunConfig) -> Result<Option<f64>> {
    let val = ds.resolve_val_classes(cfg.calibration_seed());
    if val.is_empty() {
        log::warn!("no validation classes available; skipping calibration");
        return Ok(None);
    }
    let cs = calibration_split(ds, &val, cfg.calibration_seed());
    if cs.held_out_seen.is_empty() || cs.pseudo_unseen.is_empty() {
        log::warn!("calibration split has an empty domain; skipping calibration");
        return Ok(None);
    }
    log::info!("calibration pass: validation classes {val:?}");
    let (model, _) = family.train(ds, &cs.split, &cfg.latent_configs())?;
    let dc = train_dc(&build_dc_training_set(model.as_ref(), ds, &cs.split, &cfg.gate)?, &cfg.gate)?;
    let seen_z = model.embed_visual(&ds.visual.select_rows(&cs.held_out_seen))?;
    let unseen_z = model.embed_visual(&ds.visual.select_rows(&cs.pseudo_unseen))?;
    let mut labels = vec![DomainLabel::Seen; seen_z.rows()];
    labels.resize(seen_z.rows() + unseen_z.rows(), DomainLabel::Unseen);
    let validation = DomainSet::new(Tensor::vstack(&[seen_z, unseen_z])?, labels)?;
    Ok(Some(calibrate(dc, &validation)?.temperature()))
}

/// Trains the latent model, class head and (for `gzsl_with_dc`) the
/// calibrated domain classifier on an already-loaded dataset.
pub fn train_pipeline(ds: &Dataset, cfg: &RunConfig) -> Result<TrainOutcome> {
    let cfg = cfg.resolved()?;
    let family = latent::lookup(&cfg.family)?;
    let domains = ClassDomains::of_dataset(ds)?;
    let split = DomainSplit::from_dataset(ds);
    let temperature = if cfg.uses_dc() && cfg.calibrate { calibration_pass(family, ds, &cfg)? } else { None };

    log::info!("training {} on {} samples", family.name(), split.train_idx.len());
    let (model, history) = family.train(ds, &split, &cfg.latent_configs())?;
    let head_set = build_head_training_set(model.as_ref(), ds, &split, &cfg.head)?;
    let head = train_head(&head_set, ds.num_classes(), &cfg.head)?;
    let dc = if cfg.uses_dc() {
        let mut dc = train_dc(&build_dc_training_set(model.as_ref(), ds, &split, &cfg.gate)?, &cfg.gate)?;
        dc.set_temperature(temperature.unwrap_or(1.0))?;
        Some(dc)
    } else {
        None
    };
    let pipeline = Pipeline::new(model, head, dc, domains, cfg.mode)?;
    Ok(TrainOutcome { pipeline, history, temperature })
}

/// Full training run writing the pipeline, history and effective config to `out`.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let resolved = cfg.resolved()?;
    let ds = resolved.load_dataset()?;
    let outcome = train_pipeline(&ds, &resolved)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    outcome.pipeline.save(out)?;
    write_text(&out.join(HISTORY_FILE), &outcome.history.to_csv())?;
    write_text(&out.join(EFFECTIVE_CONFIG_FILE), &(serde_json::to_string_pretty(&resolved)? + "\n"))?;
    Ok(outcome)
}

/// Evaluation outputs of one mode.
#[derive(Debug, Clone, PartialEq)]
pub enum ModeReport {
    Gzsl(EvalReport),
    Zsl { acc_unseen: f64 },
}

impl ModeReport {
    pub fn table_row(&self) -> String {
        match self {
            ModeReport::Gzsl(r) => r.table_row(),
            ModeReport::Zsl { acc_unseen } => format!("{:<14} {:>8}  {:>10.4}  {:>6}  {:>6}", "zsl", "-", acc_unseen, "-", "-"),
        }
    }
}

/// Evaluates `modes` and writes `report_<mode>.json` (plus `curve_<mode>.csv`
/// for generalised modes) into `out`.
pub fn eval_run(pipeline: &Pipeline, ds: &Dataset, modes: &[PredictionMode], grid_points: usize, out: &Path) -> Result<Vec<ModeReport>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut reports = Vec::new();
    for &mode in modes {
        let report = match mode {
            PredictionMode::Zsl => {
                let acc_unseen = pipeline.zsl_accuracy(ds)?;
                let json = serde_json::json!({ "mode": "zsl", "acc_unseen": acc_unseen });
                write_text(&out.join("report_zsl.json"), &(serde_json::to_string_pretty(&json)? + "\n"))?;
                ModeReport::Zsl { acc_unseen }
            }
            _ => {
                let r = pipeline.full_report(ds, mode, grid_points)?;
                write_text(&out.join(format!("report_{mode}.json")), &(serde_json::to_string_pretty(&r)? + "\n"))?;
                write_text(&out.join(format!("curve_{mode}.csv")), &r.curve_csv())?;
                ModeReport::Gzsl(r)
            }
        };
        reports.push(report);
    }
    Ok(reports)
}

/// Writes a synthetic dataset directory. A non-empty target is refused
/// unless `force` is set.
pub fn synth_run(spec: &SynthSpec, out: &Path, force: bool) -> Result<Dataset> {
    if !force && out.exists() {
        let mut entries = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() {
            return Err(Error::config("out", format!("{} is not empty; pass --force to overwrite", out.display())));
        }
    }
    let ds = synth_benchmark(spec)?;
    save_dataset(&ds, out)?;
    Ok(ds)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_requires_seed_and_one_source() {
        let e = RunConfig::from_json(r#"{"family": "cada", "synth": {}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "seed"), "{e}");
        let cfg = RunConfig::from_json(r#"{"seed": 3}"#).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "dataset"));
        let both = RunConfig::from_json(r#"{"seed": 3, "synth": {}, "dataset": "d"}"#).unwrap();
        assert!(both.validate().is_err());
        let e = RunConfig::from_json(r#"{"seed": 3, "synth": {}, "colour": 1}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "colour"), "{e}");
    }

    #[test]
    fn unknown_family_is_a_config_error() {
        let cfg = RunConfig { family: "flow".into(), synth: Some(SynthSpec::default()), ..RunConfig::new(1) };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "family"));
    }

    #[test]
    fn resolved_seeds_depend_only_on_run_seed() {
        let cfg = RunConfig { synth: Some(SynthSpec::default()), ..RunConfig::new(7) };
        let a = cfg.resolved().unwrap();
        let b = RunConfig { cada: CadaConfig { seed: 99, ..CadaConfig::default() }, ..cfg.clone() }.resolved().unwrap();
        assert_eq!(a, b);
        assert_ne!(a.cada.seed, a.head.seed);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(RunConfig::from_json(&json).unwrap(), a);
    }

    #[test]
    fn calibration_split_shapes() {
        let ds = synth_benchmark(&SynthSpec { samples_per_class: 10, ..SynthSpec::default() }).unwrap();
        let val: BTreeSet<usize> = [1, 5].into_iter().collect();
        let cs = calibration_split(&ds, &val, 3);
        assert_eq!(cs.split.seen.len(), 6);
        assert!(cs.split.unseen.contains(&5) && cs.split.unseen.contains(&9));
        assert_eq!(cs.held_out_seen.len(), 12);
        assert_eq!(cs.split.train_idx.len(), 48);
        assert_eq!(cs.pseudo_unseen.len(), 20);
        assert!(cs.split.train_idx.iter().all(|i| !cs.held_out_seen.contains(i)));
        assert!(cs.split.train_idx.iter().all(|&i| !val.contains(&ds.labels[i])));
    }

    #[test]
    fn synth_refuses_non_empty_target() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x"), "1").unwrap();
        let spec = SynthSpec { samples_per_class: 2, ..SynthSpec::default() };
        assert!(matches!(synth_run(&spec, dir.path(), false), Err(Error::Config { .. })));
        synth_run(&spec, dir.path(), true).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), synth_benchmark(&spec).unwrap());
    }
}
