//! `wsseg` command line: data generation, training, evaluation, sweeps,
//! gradient checks and multi-seed comparisons.
//!
//! Exit status is 0 on success, 2 for usage or configuration errors (nothing
//! is written) and 1 for failures at run time.

pub mod config;
pub mod experiment;
pub mod gradsuite;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::eval;
use crate::exec::Exec;
use crate::trainer::{checkpoint, Variant};
use config::ExperimentConfig;
use experiment::{write_atomic, Dataset, ExperimentError};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; detected before any output is written.
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "wsseg", version, about = "Weakly supervised segmentation experiments")]
struct Cli {
    /// Run independent work items on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with calibrated weak labels.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `[data] seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one variant; writes metrics.csv and model.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Overrides `[train] variant`.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per adversarial weight and summarize.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: String,
        /// Comma-separated λ_a values.
        #[arg(long = "lambda-a")]
        lambda_a: String,
        /// Comma-separated run seeds to average over.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = gradsuite::DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every variant under every seed and summarize Dice.
    Compare {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variant names.
        #[arg(long)]
        variants: String,
        /// Comma-separated run seeds.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match dispatch(cli.command, exec) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, exec: Exec) -> Result<(), CliError> {
    match command {
        Command::GenData { config, out, seed } => gen_data(&config, out, seed, exec),
        Command::Train {
            config,
            data,
            variant,
            out,
        } => train(&config, &data, variant.as_deref(), out),
        Command::Eval { model, data, out } => evaluate(&model, &data, &out, exec),
        Command::Sweep {
            config,
            data,
            variant,
            lambda_a,
            seeds,
            out,
        } => sweep(&config, &data, &variant, &lambda_a, seeds.as_deref(), out, exec),
        Command::Gradcheck { instances, seed } => gradcheck(instances, seed),
        Command::Compare {
            data,
            variants,
            seeds,
            config,
            out,
        } => compare(&data, &variants, &seeds, config.as_deref(), out, exec),
    }
}

fn parse_variant(raw: &str) -> Result<Variant, CliError> {
    raw.trim().parse().map_err(CliError::Config)
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, CliError> {
    let items = raw
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| CliError::Config(format!("{what}: cannot parse `{}`", s.trim())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if items.is_empty() {
        return Err(CliError::Config(format!("{what}: empty list")));
    }
    Ok(items)
}

fn output_dir(out: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    out.or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::Config("no --out given and no [output] dir in the config".into()))
}

/// Loads a dataset and aligns the config's image side with it.
fn load_data(dir: &Path, cfg: &mut ExperimentConfig) -> Result<Dataset, CliError> {
    let ds = Dataset::load(dir)?;
    let side = ds.train[0].full.height();
    cfg.data.shape.side = side;
    cfg.net_config()
        .validate()
        .map_err(|e| CliError::Config(format!("{} (dataset side {side})", e)))?;
    Ok(ds)
}

fn gen_data(config: &Path, out: Option<PathBuf>, seed: Option<u64>, exec: Exec) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let out = output_dir(out, &cfg)?;
    let seed = seed.unwrap_or(cfg.data.seed);
    let ds = Dataset::generate(&cfg.data, seed, exec).map_err(|e| match e {
        crate::synthdata::DataError::UnreachableRatio { .. } => CliError::Config(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })?;
    ds.save(&out)?;
    println!(
        "wrote {} train + {} test samples to {} (erosion x{}, ratio {:.4})",
        ds.train.len(),
        ds.test.len(),
        out.display(),
        ds.calibration.iterations,
        ds.calibration.achieved_ratio
    );
    Ok(())
}

fn train(config: &Path, data: &Path, variant: Option<&str>, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    let variant = match (variant, cfg.train.variant) {
        (Some(v), _) => parse_variant(v)?,
        (None, Some(v)) => v,
        (None, None) => {
            return Err(CliError::Config("no --variant given and no [train] variant".into()))
        }
    };
    if let Some(mode) = cfg.train.pool_mode {
        if variant.pool_mode() != Some(mode) {
            return Err(CliError::Config(format!("pool_mode {mode} does not match {variant}")));
        }
    }
    let out = output_dir(out, &cfg)?;
    let ds = load_data(data, &mut cfg)?;
    let run = experiment::run_variant(&cfg, &ds, variant, None, None)?;
    experiment::save_run(&run, &out)?;
    write_atomic(&out.join("config.ini"), cfg.to_canonical().as_bytes())?;
    println!(
        "{variant}: test dice {:.4}, expansion {:.3}",
        run.report.mean_dice, run.report.mean_expansion
    );
    Ok(())
}

fn evaluate(model: &Path, data: &Path, out: &Path, exec: Exec) -> Result<(), CliError> {
    let ds = Dataset::load(data)?;
    let side = ds.train[0].full.height();
    let net = checkpoint::restore_inferred(model, side).map_err(ExperimentError::from)?;
    let mut report = eval::evaluate(&net, ds.eval_set(), exec).map_err(ExperimentError::from)?;
    report.bounds = ds.train_bounds().ok();
    write_atomic(out, report.to_csv().as_bytes())?;
    println!(
        "mean dice {:.4}, mean expansion {:.3} over {} samples",
        report.mean_dice,
        report.mean_expansion,
        report.samples.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    config: &Path,
    data: &Path,
    variant: &str,
    lambdas: &str,
    seeds: Option<&str>,
    out: Option<PathBuf>,
    exec: Exec,
) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    let variant = parse_variant(variant)?;
    if !variant.is_adversarial() {
        return Err(CliError::Config(format!("{variant} has no adversarial weight to sweep")));
    }
    let lambdas: Vec<f64> = parse_list(lambdas, "--lambda-a")?;
    if let Some(bad) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(CliError::Config(format!("--lambda-a: {bad} must be finite and non-negative")));
    }
    let seeds: Option<Vec<u64>> = seeds.map(|s| parse_list(s, "--seeds")).transpose()?;
    let out = output_dir(out, &cfg)?;
    let ds = load_data(data, &mut cfg)?;
    let (runs, rows) = experiment::sweep(&cfg, &ds, variant, &lambdas, seeds.as_deref(), exec)?;
    experiment::create_dir(&out)?;
    for run in &runs {
        let dir = out.join(format!("lambda_{}_seed{}", run.lambda_a, run.seeds.init));
        experiment::save_run(run, &dir)?;
    }
    let csv = experiment::sweep_csv(&rows);
    write_atomic(&out.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(instances: usize, seed: u64) -> Result<(), CliError> {
    if instances == 0 {
        return Err(CliError::Config("--instances must be at least 1".into()));
    }
    let reports = gradsuite::run_suite(instances, seed).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<34} {:>4} {:>12.3e} {status}", r.op, r.instances, r.max_error);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} op(s) exceed max relative error {:e}",
            gradsuite::TOLERANCE
        )));
    }
    Ok(())
}

fn compare(
    data: &Path,
    variants: &str,
    seeds: &str,
    config: Option<&Path>,
    out: Option<PathBuf>,
    exec: Exec,
) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let variants: Vec<Variant> = variants
        .split(',')
        .map(parse_variant)
        .collect::<Result<_, _>>()?;
    let seeds: Vec<u64> = parse_list(seeds, "--seeds")?;
    let out = output_dir(out, &cfg)?;
    let ds = load_data(data, &mut cfg)?;
    let (runs, rows) = experiment::compare(&cfg, &ds, &variants, &seeds, exec)?;
    experiment::create_dir(&out)?;
    for (run, (v, s)) in runs
        .iter()
        .zip(variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))))
    {
        experiment::save_run(run, &out.join(experiment::run_dir_name(v, s)))?;
    }
    let csv = experiment::compare_csv(&rows);
    write_atomic(&out.join("compare.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}
