//! `gzsl`: train, evaluate and inspect latent-space GZSL pipelines.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gzsl_core::checks;
use gzsl_core::data::{load_dataset, validate_splits, SynthSpec};
use gzsl_core::eval::EvalReport;
use gzsl_core::gzsl::{Pipeline, PredictionMode, MANIFEST_FILE};
use gzsl_core::run::{self, RunConfig, EFFECTIVE_CONFIG_FILE, HISTORY_FILE};
use gzsl_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "gzsl", version, about = "Generalised zero-shot learning with latent models and a domain classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a latent model, class head and domain classifier.
    Train(TrainArgs),
    /// Evaluate a trained pipeline.
    Eval(EvalArgs),
    /// Same as `eval`; use `--grid` to set the number of seen-score shifts.
    Ausuc(EvalArgs),
    /// Write a synthetic benchmark dataset.
    Synth(SynthArgs),
    /// Compare every loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Gzsl,
    Zsl,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the domain classifier.
    #[arg(long)]
    no_dc: bool,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Overrides the config's `grid_points`.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Pipeline directory or its manifest.json.
    manifest: PathBuf,
    /// Dataset directory. Defaults to the dataset described by the run's
    /// effective config.
    #[arg(long, conflicts_with = "config")]
    dataset: Option<PathBuf>,
    /// Run configuration describing the dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config used to rebuild the dataset.
    #[arg(long)]
    seed: Option<u64>,
    /// Report directory. Defaults to the pipeline directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report only the ungated classifier.
    #[arg(long)]
    no_dc: bool,
    #[arg(long, value_enum, default_value = "gzsl")]
    mode: ModeArg,
    /// Number of seen-score shifts on the trade-off curve.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synthetic benchmark spec (JSON). Defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Seed of the toy instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_USAGE,
        Error::Numeric(_) | Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Dimension { .. }
        | Error::Contract(_)
        | Error::Data(_)
        | Error::Integrity(_)
        | Error::Io { .. }
        | Error::Json(_) => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GZSL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) | Command::Ausuc(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::from_file(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(grid) = a.grid {
        cfg.grid_points = grid;
    }
    cfg.mode = match (a.mode, a.no_dc) {
        (Some(ModeArg::Zsl), _) => PredictionMode::Zsl,
        (Some(ModeArg::Gzsl), true) | (None, true) => PredictionMode::GzslPlain,
        (Some(ModeArg::Gzsl), false) => PredictionMode::GzslWithDc,
        (None, false) => cfg.mode,
    };
    let out = a
        .out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::config("out_dir", "pass --out or set `out_dir` in the config"))?;
    let outcome = run::train_run(&cfg, &out)?;
    println!("trained {} pipeline ({}) in {}", outcome.pipeline.family(), outcome.pipeline.mode, out.display());
    if let Some(t) = outcome.temperature {
        println!("domain classifier temperature {t:.4}");
    }
    println!("wrote {MANIFEST_FILE}, {HISTORY_FILE}, {EFFECTIVE_CONFIG_FILE}");
    Ok(ExitCode::SUCCESS)
}

/// Looks for the effective config that `train` writes next to the manifest.
fn run_config_beside(manifest: &Path) -> Option<PathBuf> {
    let dir = if manifest.is_dir() { manifest.to_path_buf() } else { manifest.parent()?.to_path_buf() };
    let p = dir.join(EFFECTIVE_CONFIG_FILE);
    p.exists().then_some(p)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let pipeline = Pipeline::load(&a.manifest)?;
    let config_path = a.config.clone().or_else(|| run_config_beside(&a.manifest));
    let cfg = config_path.as_deref().map(RunConfig::from_file).transpose()?;
    let ds = match (&a.dataset, &cfg) {
        (Some(p), _) => {
            let mut ds = load_dataset(p)?;
            if cfg.as_ref().is_some_and(|c| c.l2_normalize) {
                ds.l2_normalize_visual();
            }
            ds
        }
        (None, Some(c)) => {
            let mut c = c.clone();
            if let Some(seed) = a.seed {
                c.seed = seed;
            }
            c.load_dataset()?
        }
        (None, None) => return Err(Error::config("dataset", "pass --dataset or --config (no effective config beside the manifest)")),
    };
    pipeline.check_dataset(&ds)?;
    let grid = a.grid.or(cfg.as_ref().map(|c| c.grid_points)).unwrap_or(run::DEFAULT_GRID_POINTS);
    let modes = match a.mode {
        ModeArg::Zsl => vec![PredictionMode::Zsl],
        ModeArg::Gzsl if a.no_dc || pipeline.dc.is_none() => vec![PredictionMode::GzslPlain],
        ModeArg::Gzsl => vec![PredictionMode::GzslWithDc, PredictionMode::GzslPlain],
    };
    if a.mode == ModeArg::Gzsl && !a.no_dc && pipeline.dc.is_none() {
        log::warn!("pipeline has no domain classifier; reporting gzsl_plain only");
    }
    let out = match a.out {
        Some(o) => o,
        None if a.manifest.is_dir() => a.manifest.clone(),
        None => a.manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    let reports = run::eval_run(&pipeline, &ds, &modes, grid, &out)?;
    println!("{}", EvalReport::table_header());
    for r in &reports {
        println!("{}", r.table_row());
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut spec: SynthSpec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::config("synth", e.to_string()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let ds = run::synth_run(&spec, &a.out, a.force)?;
    let violations = validate_splits(&ds);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Data(list.join("; ")));
    }
    println!(
        "wrote {} seen + {} unseen classes ({} samples) to {}",
        ds.seen_classes.len(),
        ds.unseen_classes.len(),
        ds.labels.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let results = checks::run_suite(a.seed)?;
    for c in &results {
        println!("{}", c.line());
    }
    let failed = results.iter().filter(|c| !c.passed()).count();
    println!("{} of {} losses within {:e}", results.len() - failed, results.len(), checks::GRADCHECK_TOLERANCE);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(EXIT_NUMERIC) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code(&Error::config("seed", "missing")), 1);
        assert_eq!(exit_code(&Error::Integrity("bad magic".into())), 2);
        assert_eq!(exit_code(&Error::Data("empty".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("diverged".into())), 3);
        assert_eq!(exit_code(&Error::NonFinite("nan".into())), 3);
    }

    #[test]
    fn ausuc_takes_the_eval_flags() {
        let cli = Cli::try_parse_from(["gzsl", "ausuc", "run", "--grid", "11", "--no-dc"]).unwrap();
        match cli.command {
            Command::Ausuc(a) => assert!(a.grid == Some(11) && a.no_dc),
            other => panic!("{other:?}"),
        }
    }
}
