//! `rlavr`: run, compare and sweep training experiments, check the alignment
//! theory numerically, generate prompt banks and plot metrics.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input.

mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use anyhow::Context;
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use rlavr_core::env::SyntheticEnv;
use rlavr_core::theory::fuzz;
use rlavr_core::trainer::{
    mean_std, replicate, run_experiment, write_comparison_csv, write_decisions, RunOutput, StrategyComparison,
};
use rlavr_core::RunConfig;

use config::{load, CompareFile, Loaded, SweepFile, TheoryFile};

static QUIET: AtomicBool = AtomicBool::new(false);

macro_rules! progress {
    ($($arg:tt)*) => {
        if !QUIET.load(Ordering::Relaxed) {
            eprintln!($($arg)*);
        }
    };
}

#[derive(Debug)]
pub enum CliError {
    /// Bad config, bad arguments, malformed input files: exit 2.
    Validation(String),
    /// Anything that fails after inputs were accepted: exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "rlavr", version, about = "Budgeted label acquisition for group-relative policy optimization")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed override; falls back to RLAVR_SEED.
    #[arg(long, global = true, env = "RLAVR_SEED")]
    seed: Option<u64>,
    /// Worker threads for compare and sweep (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overwrite existing run directories.
    #[arg(long, global = true)]
    force: bool,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train once and write metrics, decisions and best checkpoints.
    Run,
    /// Run several strategies on a shared environment across seeds.
    Compare,
    /// Grid over p, p2 and strategy axes.
    Sweep,
    /// Fuzz the gradient-cosine identity and the alignment bound.
    TheoryCheck,
    /// Write the train and eval prompt banks for a config.
    GenBank,
    /// Draw SVG charts from one or more metrics CSV files.
    Plot {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    QUIET.store(cli.quiet, Ordering::Relaxed);
    let result = match &cli.command {
        Command::Run => cmd_run(&cli),
        Command::Compare => cmd_compare(&cli),
        Command::Sweep => cmd_sweep(&cli),
        Command::TheoryCheck => cmd_theory(&cli),
        Command::GenBank => cmd_gen_bank(&cli),
        Command::Plot { files } => plot::plot_files(files, &cli.out).map(|paths| {
            for p in paths {
                progress!("wrote {}", p.display());
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn config_path(cli: &Cli) -> Result<&Path, CliError> {
    cli.config
        .as_deref()
        .ok_or_else(|| CliError::Validation("--config is required for this command".into()))
}

fn pool(cli: &Cli) -> Result<rayon::ThreadPool, CliError> {
    if cli.jobs == Some(0) {
        return Err(CliError::Validation("--jobs must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .context("building worker pool")
        .map_err(CliError::Runtime)
}

/// Creates `dir`, refusing to reuse a non-empty one unless forced.
fn claim_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(CliError::Validation(format!(
                "{} already exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        if occupied {
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes every artifact of a finished run into `dir`.
fn write_run(dir: &Path, out: &RunOutput) -> anyhow::Result<()> {
    let resolved = toml::to_string(&out.config).context("serializing resolved config")?;
    fs::write(dir.join("config.resolved.toml"), resolved)?;
    let mut csv = Vec::new();
    out.metrics.write_csv(&mut csv)?;
    fs::write(dir.join("metrics.csv"), csv)?;
    write_json(&dir.join("summary.json"), &out.summary)?;
    let mut log = Vec::new();
    write_decisions(&out.decisions, &mut log)?;
    fs::write(dir.join("decisions.jsonl"), log)?;
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    write_json(&ckpt.join("policy.json"), &out.best_policy)?;
    if let Some(cls) = &out.best_classifiers {
        fs::write(ckpt.join("classifiers.json"), cls)?;
    }
    Ok(())
}

fn execute(cfg: &RunConfig, dir: &Path) -> anyhow::Result<RunOutput> {
    let out = run_experiment(cfg).with_context(|| format!("run in {}", dir.display()))?;
    write_run(dir, &out)?;
    progress!(
        "{}: best accuracy {:.4} at step {}",
        dir.display(),
        out.metrics.best_accuracy,
        out.metrics.best_step
    );
    Ok(out)
}

fn cmd_run(cli: &Cli) -> Result<(), CliError> {
    let loaded: Loaded<RunConfig> = load(config_path(cli)?)?;
    let mut cfg = loaded.value.clone();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| loaded.explain(e, ""))?;
    claim_dir(&cli.out, cli.force)?;
    execute(&cfg, &cli.out)?;
    Ok(())
}

struct Job {
    group: usize,
    seed: u64,
    dir: PathBuf,
    config: RunConfig,
}

/// Runs all jobs on the pool, returning best accuracies grouped in job order.
fn run_jobs(cli: &Cli, jobs: Vec<Job>, groups: usize) -> Result<Vec<Vec<(u64, RunOutput)>>, CliError> {
    for job in &jobs {
        claim_dir(&job.dir, cli.force)?;
    }
    let pool = pool(cli)?;
    let outputs: Vec<anyhow::Result<RunOutput>> =
        pool.install(|| jobs.par_iter().map(|j| execute(&j.config, &j.dir)).collect());
    let mut grouped: Vec<Vec<(u64, RunOutput)>> = (0..groups).map(|_| Vec::new()).collect();
    for (job, out) in jobs.iter().zip(outputs) {
        grouped[job.group].push((job.seed, out?));
    }
    Ok(grouped)
}

fn seeds_of(cli: &Cli, listed: &[u64], loaded_err: impl Fn() -> CliError) -> Result<Vec<u64>, CliError> {
    if let Some(s) = cli.seed {
        return Ok(vec![s]);
    }
    if listed.is_empty() {
        return Err(loaded_err());
    }
    Ok(listed.to_vec())
}

fn cmd_compare(cli: &Cli) -> Result<(), CliError> {
    let loaded: Loaded<CompareFile> = load(config_path(cli)?)?;
    let file = &loaded.value;
    let seeds = seeds_of(cli, &file.seeds, || loaded.field_error("seeds", "list at least one seed"))?;
    if file.strategies.is_empty() {
        return Err(loaded.field_error("strategies", "list at least one strategy"));
    }
    file.base.validate().map_err(|e| loaded.explain(e, "base"))?;
    fs::create_dir_all(&cli.out).context("creating output directory")?;

    let mut jobs = Vec::new();
    for (group, &strategy) in file.strategies.iter().enumerate() {
        let cfg = RunConfig {
            strategy,
            ..file.base.clone()
        };
        for &seed in &seeds {
            jobs.push(Job {
                group,
                seed,
                dir: cli.out.join(strategy.as_str()).join(format!("seed-{seed}")),
                config: replicate(&cfg, seed),
            });
        }
    }
    let grouped = run_jobs(cli, jobs, file.strategies.len())?;
    let rows: Vec<StrategyComparison> = file
        .strategies
        .iter()
        .zip(&grouped)
        .map(|(&strategy, runs)| {
            let best: Vec<f64> = runs.iter().map(|(_, o)| o.metrics.best_accuracy).collect();
            let (mean, std) = mean_std(&best);
            StrategyComparison {
                label: strategy.to_string(),
                strategy,
                seeds: runs.iter().map(|(s, _)| *s).collect(),
                best_accuracies: best,
                mean,
                std,
            }
        })
        .collect();
    let mut csv = Vec::new();
    write_comparison_csv(&rows, &mut csv).map_err(anyhow::Error::from)?;
    fs::write(cli.out.join("comparison.csv"), csv).context("writing comparison.csv")?;
    for r in &rows {
        progress!("{:<12} {:.4} +- {:.4}", r.label, r.mean, r.std);
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli) -> Result<(), CliError> {
    let loaded: Loaded<SweepFile> = load(config_path(cli)?)?;
    let seeds = seeds_of(cli, &loaded.value.seeds, || loaded.field_error("seeds", "list at least one seed"))?;
    let grid = loaded.grid()?;
    for point in &grid {
        point.config.validate().map_err(|e| {
            // Axis values override base fields, so point at the axis when one is involved.
            match e {
                rlavr_core::Error::Config { ref field, ref reason } if point.coords.contains_key(field.as_str()) => {
                    loaded.field_error(&format!("axes.{field}"), reason)
                }
                other => loaded.explain(other, "base"),
            }
        })?;
    }
    fs::create_dir_all(&cli.out).context("creating output directory")?;

    let mut jobs = Vec::new();
    for (group, point) in grid.iter().enumerate() {
        for &seed in &seeds {
            jobs.push(Job {
                group,
                seed,
                dir: cli.out.join(point.label()).join(format!("seed-{seed}")),
                config: replicate(&point.config, seed),
            });
        }
    }
    let grouped = run_jobs(cli, jobs, grid.len())?;

    let mut w = csv::Writer::from_path(cli.out.join("sweep.csv")).context("creating sweep.csv")?;
    w.write_record([
        "strategy",
        "p",
        "p2",
        "seeds",
        "mean_best_accuracy",
        "std_best_accuracy",
        "mean_final_accuracy",
        "mean_budget_ratio",
        "per_seed",
    ])
    .context("writing sweep.csv")?;
    for (point, runs) in grid.iter().zip(&grouped) {
        let best: Vec<f64> = runs.iter().map(|(_, o)| o.metrics.best_accuracy).collect();
        let finals: Vec<f64> = runs
            .iter()
            .filter_map(|(_, o)| o.metrics.final_eval_accuracy())
            .collect();
        let ratios: Vec<f64> = runs.iter().map(|(_, o)| o.summary.budget_ratio).collect();
        let (mean, std) = mean_std(&best);
        let c = &point.config;
        w.write_record([
            c.strategy.to_string(),
            c.p.to_string(),
            c.p2.to_string(),
            runs.len().to_string(),
            mean.to_string(),
            std.to_string(),
            mean_std(&finals).0.to_string(),
            mean_std(&ratios).0.to_string(),
            best.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(";"),
        ])
        .context("writing sweep.csv")?;
        progress!("{:<40} {:.4} +- {:.4}", point.label(), mean, std);
    }
    w.flush().context("writing sweep.csv")?;
    Ok(())
}

#[derive(Serialize)]
struct TheoryCsvRow {
    seed: u64,
    #[serde(rename = "G")]
    group_size: usize,
    d: f64,
    kappa: f64,
    cos_grad: f64,
    cos_transformed: f64,
    bound: f64,
    satisfied: bool,
}

fn cmd_theory(cli: &Cli) -> Result<(), CliError> {
    let mut file = TheoryFile::default();
    if let Some(path) = &cli.config {
        let loaded: Loaded<TheoryFile> = load(path)?;
        loaded.value.theory.validate().map_err(|e| loaded.explain(e, ""))?;
        file = loaded.value;
    }
    if let Some(seed) = cli.seed {
        file.seed = seed;
    }
    let cfg = rlavr_core::theory::FuzzConfig {
        keep_records: true,
        ..file.theory
    };
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    claim_dir(&cli.out, cli.force)?;
    let (records, summary) = fuzz(&cfg, file.seed).context("fuzzing theory instances")?;

    let mut w = csv::Writer::from_path(cli.out.join("theory.csv")).context("creating theory.csv")?;
    for r in &records {
        w.serialize(TheoryCsvRow {
            seed: r.seed,
            group_size: r.group_size,
            d: r.d,
            kappa: r.kappa,
            cos_grad: r.cos_grad,
            cos_transformed: r.cos_transformed,
            bound: r.bound,
            satisfied: r.satisfied,
        })
        .context("writing theory.csv")?;
    }
    w.flush().context("writing theory.csv")?;
    write_json(&cli.out.join("theory_summary.json"), &summary)?;
    progress!(
        "{} instances, {} checked, {} violations, max identity gap {:.3e}",
        summary.instances,
        summary.checked,
        summary.violations,
        summary.max_identity_gap
    );
    if summary.violations > 0 {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "{} instances violate the alignment bound",
            summary.violations
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct BankInfo<'a> {
    config: &'a rlavr_core::EnvConfig,
    distractor_bias: f64,
    realized_hard_fraction: f64,
    teacher: &'a [f64],
    initial_policy: &'a rlavr_core::PolicySnapshot,
}

fn cmd_gen_bank(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::default();
    let loaded = match &cli.config {
        Some(path) => {
            let l: Loaded<RunConfig> = load(path)?;
            cfg = l.value.clone();
            Some(l)
        }
        None => None,
    };
    if let Some(seed) = cli.seed {
        cfg.env.seed = seed;
    }
    if let Err(e) = cfg.env.validate() {
        return Err(match &loaded {
            Some(l) => l.explain(e, ""),
            None => CliError::Validation(e.to_string()),
        });
    }
    claim_dir(&cli.out, cli.force)?;
    let env = SyntheticEnv::generate(&cfg.env).context("generating banks")?;
    env.train.write_json(cli.out.join("train_bank.json")).context("writing train bank")?;
    env.eval.write_json(cli.out.join("eval_bank.json")).context("writing eval bank")?;
    write_json(
        &cli.out.join("env.json"),
        &BankInfo {
            config: &env.config,
            distractor_bias: env.distractor_bias,
            realized_hard_fraction: env.realized_hard_fraction,
            teacher: &env.teacher,
            initial_policy: &env.initial_policy,
        },
    )?;
    progress!(
        "{} train / {} eval prompts, {:.1}% initially wrong-modal",
        env.train.len(),
        env.eval.len(),
        100.0 * env.realized_hard_fraction
    );
    Ok(())
}
