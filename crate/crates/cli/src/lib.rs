//! Command-line front end for `calidro`.
//!
//! Every subcommand except `calibrate --alpha` reads a JSON experiment
//! config (or a `manifest.json` written by an earlier run), applies
//! `--set key=value` overrides and then the dedicated flags, and writes its
//! outputs plus a manifest under `--out`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use calidro_core::calibration::radius_for_level;
use calidro_core::harness::{
    self, calibrate_single, run_alpha_sweep, run_experiment, set_dotted, single_item_sigma,
    solve_single, theorem_check, write_frequency_csv, write_json, write_results_csv,
    write_sweep_csv, ExperimentConfig, ProblemConfig,
};
use calidro_core::probstats::ConfidenceLevel;
use calidro_core::Error;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

/// Levels swept by `simulate-newsvendor` when the config lists none.
pub const DEFAULT_ALPHAS: [f64; 5] = [0.4, 0.25, 0.1, 0.05, 0.005];

#[derive(Debug, Parser)]
#[command(name = "calidro", version, about = "Calibrated distributionally robust constraints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the radius for a level, or compute the configured radii on one
    /// replicate's training set.
    Calibrate {
        /// Per-constraint level α; prints `z²_{1-α}`.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Solve one replicate and report its population check.
    Solve {
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Frequency sweep over the α levels of a newsvendor config.
    SimulateNewsvendor {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Replicated fairness experiment.
    FairnessRun {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Standardized constraint values against the limit law.
    TheoremCheck {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// Experiment config (JSON) or a manifest from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for results and the manifest (default: current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set solver.dual_tol=1e-4`. Values
    /// parse as JSON, falling back to a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides `master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `parallel`.
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long, default_value = "warn")]
    pub log_level: String,
}

/// Exit code for configuration and input errors.
pub const EXIT_CONFIG: i32 = 1;
/// Exit code for solver failures.
pub const EXIT_SOLVER: i32 = 2;

/// Maps an error chain to an exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(e) if is_solver_failure(e) => EXIT_SOLVER,
        _ => EXIT_CONFIG,
    }
}

fn is_solver_failure(e: &Error) -> bool {
    e.is_non_convergence()
        || matches!(
            e,
            Error::TooManyFailures { .. } | Error::BracketFailure { .. }
        )
}

/// Reads `path`, applies overrides in order (`--set`, then `--seed` and
/// `--parallel`) and returns the normalized config.
pub fn validate_config(path: &Path, args: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    if let Some(config) = value.get("config").filter(|_| value.get("manifest_version").is_some()) {
        value = config.clone();
    }
    for o in &args.overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{o}: override must look like key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_dotted(&mut value, key.trim(), parsed)?;
    }
    if let Some(seed) = args.seed {
        set_dotted(&mut value, "master_seed", seed.into())?;
    }
    if let Some(p) = args.parallel {
        set_dotted(&mut value, "parallel", p.into())?;
    }
    ExperimentConfig::from_value(value)
}

#[derive(Serialize)]
struct Manifest<'a> {
    manifest_version: u32,
    subcommand: &'a str,
    config: &'a ExperimentConfig,
    master_seed: u64,
    replicate_seeds: Vec<u64>,
    oracle_seed: u64,
    versions: Versions,
    outputs: Vec<&'a str>,
}

#[derive(Serialize)]
struct Versions {
    calidro: &'static str,
}

fn write_manifest(out: &Path, subcommand: &str, cfg: &ExperimentConfig, outputs: &[&str]) -> anyhow::Result<()> {
    let manifest = Manifest {
        manifest_version: 1,
        subcommand,
        config: cfg,
        master_seed: cfg.master_seed,
        replicate_seeds: (0..cfg.replicates)
            .map(|r| harness::replicate_seed(cfg.master_seed, r))
            .collect(),
        oracle_seed: cfg.oracle.seed,
        versions: Versions {
            calidro: env!("CARGO_PKG_VERSION"),
        },
        outputs: outputs.to_vec(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn load(common: &CommonArgs) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("config: --config is required".into()))?;
    let cfg = validate_config(path, common)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok((cfg, out))
}

fn print_table(table: &harness::FrequencyTable) {
    for row in &table.rows {
        println!(
            "constraint {:>5}: {}/{} satisfied, frequency {:.4} (se {:.4}, marginal {})",
            row.constraint_id, row.satisfied, row.total, row.frequency, row.std_error, row.marginal
        );
    }
    if table.failures > 0 {
        println!("failed replicates: {}", table.failures);
    }
}

/// Runs a parsed invocation.
pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Calibrate {
            alpha,
            replicate,
            common,
        } => {
            if let Some(a) = alpha {
                let rho = radius_for_level(ConfidenceLevel::new(a)?)?;
                println!("{rho:.6}");
                return Ok(());
            }
            let (cfg, out) = load(&common)?;
            let radii = calibrate_single(&cfg, replicate)?;
            println!(
                "{}",
                radii.iter().map(|r| format!("{r:.6}")).collect::<Vec<_>>().join(" ")
            );
            write_json(&out.join("results.json"), &radii)?;
            write_manifest(&out, "calibrate", &cfg, &["results.json"])?;
        }
        Command::Solve { replicate, common } => {
            let (cfg, out) = load(&common)?;
            let report = solve_single(&cfg, replicate)?;
            println!("theta = {:?}", report.theta_hat);
            println!("lambda = {:?}", report.lambda_hat);
            for (k, c) in report.constraints.iter().enumerate() {
                println!("constraint {k}: population value {:.6e}, satisfied {}", c.pop_value, c.satisfied);
            }
            write_results_csv(&out.join("results.csv"), std::slice::from_ref(&report))?;
            write_json(&out.join("results.json"), &report)?;
            write_manifest(&out, "solve", &cfg, &["results.csv", "results.json"])?;
        }
        Command::SimulateNewsvendor { common } => {
            let (mut cfg, out) = load(&common)?;
            if !matches!(cfg.problem, ProblemConfig::Newsvendor(_)) {
                return Err(Error::Config("problem.kind: expected newsvendor".into()).into());
            }
            if cfg.alphas.is_empty() {
                cfg.alphas = DEFAULT_ALPHAS.to_vec();
            }
            let sweep = run_alpha_sweep(&cfg)?;
            for p in &sweep {
                println!("alpha {} (rho {:.4})", p.alpha, p.rho);
                print_table(&p.outcome.table);
            }
            write_sweep_csv(&out.join("results.csv"), &sweep)?;
            write_json(&out.join("results.json"), &sweep)?;
            write_manifest(&out, "simulate-newsvendor", &cfg, &["results.csv", "results.json"])?;
        }
        Command::FairnessRun { common } => {
            let (cfg, out) = load(&common)?;
            if !matches!(cfg.problem, ProblemConfig::Fairness(_)) {
                return Err(Error::Config("problem.kind: expected fairness".into()).into());
            }
            let outcome = run_experiment(&cfg)?;
            print_table(&outcome.table);
            let mut errors: Vec<f64> = outcome.reports.iter().filter_map(|r| r.error_rate).collect();
            errors.sort_by(f64::total_cmp);
            if !errors.is_empty() {
                println!("median error rate {:.4}", errors[errors.len() / 2]);
            }
            write_results_csv(&out.join("results.csv"), &outcome.reports)?;
            write_frequency_csv(&out.join("frequencies.csv"), &outcome.table)?;
            write_json(&out.join("results.json"), &outcome)?;
            write_manifest(
                &out,
                "fairness-run",
                &cfg,
                &["results.csv", "frequencies.csv", "results.json"],
            )?;
        }
        Command::TheoremCheck { common } => {
            let (cfg, out) = load(&common)?;
            let ProblemConfig::Newsvendor(spec) = &cfg.problem else {
                return Err(Error::Config("problem.kind: expected newsvendor".into()).into());
            };
            let sigma = single_item_sigma(spec)?;
            let check = theorem_check(&cfg, sigma)?;
            println!(
                "standardized mean {:.4} (limit {:.4}), variance {:.4}, {} replicates",
                check.mean,
                check.expected_mean,
                check.variance,
                check.standardized.len()
            );
            write_results_csv(&out.join("results.csv"), &check.outcome.reports)?;
            write_json(&out.join("results.json"), &check)?;
            write_manifest(&out, "theorem-check", &cfg, &["results.csv", "results.json"])?;
        }
    }
    Ok(())
}

fn log_level(cli: &Cli) -> &str {
    match &cli.command {
        Command::Calibrate { common, .. }
        | Command::Solve { common, .. }
        | Command::SimulateNewsvendor { common }
        | Command::FairnessRun { common }
        | Command::TheoremCheck { common } => &common.log_level,
    }
}

/// Parses `args`, runs, prints any error and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(log_level(&cli))
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
