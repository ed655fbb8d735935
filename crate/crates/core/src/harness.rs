//! Replicated experiments.
//!
//! Each replicate draws a training set, solves it with the configured
//! method and checks the population constraints at the solution. Replicate
//! `r` is seeded with [`replicate_seed`]`(master_seed, r)`, so results do not
//! depend on how replicates are scheduled across threads.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibration::{
    estimate_constraint_correlation, joint_radii_on_subset, joint_radius_search, radius_for_level,
};
use crate::error::{Error, Result};
use crate::fairness::{
    bootstrap_replicate, error_rate, fairness_program, group_rates, load_dataset,
    synthesize_dataset, DatasetSchema, FairnessConstraintConfig, LabeledDataset, LogisticLoss,
    SyntheticParams,
};
use crate::newsvendor::{self, NewsvendorSpec, PopulationOracle};
use crate::probstats::{empirical_moments, ConfidenceLevel};
use crate::program::{PerSample, RobustProgram};
use crate::solver::{
    identify_active_set, saa_solve, solve, solve_from, stage_two, two_dataset_solve,
    EtaSchedule, SolveResult, SolverConfig,
};

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(splitmix64(master) ⊕ r)`.
pub fn replicate_seed(master: u64, replicate: usize) -> u64 {
    splitmix64(splitmix64(master) ^ replicate as u64)
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Saa,
    Robust,
    TwoStage,
    Proxy,
    TwoDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CalibrationConfig {
    /// `ρ_k = z²_{1-α}` for every constraint.
    PerConstraint { alpha: f64 },
    /// Common threshold for joint coverage `level`, estimated at a pilot
    /// SAA solution.
    Joint {
        level: f64,
        #[serde(default = "default_joint_draws")]
        draws: usize,
    },
    Manual { rho: Vec<f64> },
}

fn default_joint_draws() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        n: usize,
        seed: u64,
        #[serde(default)]
        params: SyntheticParams,
    },
    Csv { path: PathBuf, schema: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessProblem {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub constraint: FairnessConstraintConfig,
    /// Training sets are `⌊rate·N⌋` rows drawn with replacement.
    #[serde(default = "default_bootstrap_rate")]
    pub bootstrap_rate: f64,
}

fn default_bootstrap_rate() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Newsvendor(NewsvendorSpec),
    Fairness(FairnessProblem),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub draws: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            draws: 1_000_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub method: Method,
    pub calibration: CalibrationConfig,
    /// Training size (newsvendor); fairness uses `bootstrap_rate`.
    pub n: usize,
    pub replicates: usize,
    pub master_seed: u64,
    pub oracle: OracleConfig,
    pub solver: SolverConfig,
    /// Part-A fraction of the two-dataset method.
    pub split_fraction: f64,
    /// Worker threads; `None` uses every available core.
    pub parallel: Option<usize>,
    /// Allowed fraction of failed replicates before the run fails.
    pub max_failure_fraction: f64,
    /// Count failed replicates in frequency denominators.
    pub count_failures: bool,
    /// Fill the `seconds` column. Off by default so reruns are
    /// byte-identical.
    pub record_seconds: bool,
    /// Levels swept by `simulate-newsvendor`; empty runs `calibration` once.
    pub alphas: Vec<f64>,
}

/// Solver settings used by experiments unless overridden: sign-based
/// adaptive multiplier steps and tolerances matched to each problem's
/// constraint scale.
pub fn default_solver(problem: &ProblemConfig) -> SolverConfig {
    let mut cfg = SolverConfig {
        eta: EtaSchedule {
            eta0: 1.0,
            decay: 0.0,
            adaptive: true,
        },
        dual_tol: 1e-3,
        ..SolverConfig::default()
    };
    match problem {
        ProblemConfig::Newsvendor(spec) => {
            cfg.feasibility_tol = if spec.dim() == 1 { 1e-4 } else { 1e-2 };
        }
        ProblemConfig::Fairness(_) => {
            cfg.feasibility_tol = 1e-3;
            cfg.inner_tol = 1e-6;
        }
    }
    cfg
}

impl ExperimentConfig {
    /// Defaults for everything but the problem.
    pub fn with_problem(problem: ProblemConfig) -> Self {
        let solver = default_solver(&problem);
        Self {
            problem,
            method: Method::Robust,
            calibration: CalibrationConfig::PerConstraint { alpha: 0.05 },
            n: 3000,
            replicates: 100,
            master_seed: 0,
            oracle: OracleConfig::default(),
            solver,
            split_fraction: 0.5,
            parallel: None,
            max_failure_fraction: 0.01,
            count_failures: false,
            record_seconds: false,
            alphas: Vec::new(),
        }
    }

    /// Builds a config from JSON: the object is laid over the defaults for
    /// its problem, then validated. Errors name the offending key.
    pub fn from_value(value: Value) -> Result<Self> {
        let problem_value = value
            .get("problem")
            .cloned()
            .ok_or_else(|| Error::Config("missing key `problem`".into()))?;
        let problem: ProblemConfig = at_path(problem_value, "problem")?;
        let mut merged = serde_json::to_value(Self::with_problem(problem))?;
        merge(&mut merged, value);
        let cfg: Self = at_path(merged, "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(Error::Config("replicates: must be at least 1".into()));
        }
        if self.n < 10 {
            return Err(Error::Config(format!("n: must be at least 10, got {}", self.n)));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config("split_fraction: must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::Config("max_failure_fraction: must lie in [0, 1]".into()));
        }
        if self.parallel == Some(0) {
            return Err(Error::Config("parallel: must be at least 1".into()));
        }
        self.solver.validate()?;
        let k = match &self.problem {
            ProblemConfig::Newsvendor(spec) => {
                spec.validate().map_err(|e| Error::Config(format!("problem: {e}")))?;
                if self.oracle.draws < 1_000_000 && !matches!(spec.demand, newsvendor::Demand::Exponential { .. }) {
                    return Err(Error::Config("oracle.draws: at least 1e6 draws are required".into()));
                }
                spec.groups.len()
            }
            ProblemConfig::Fairness(f) => {
                if !(f.bootstrap_rate > 0.0 && f.bootstrap_rate <= 1.0) {
                    return Err(Error::Config("problem.bootstrap_rate: must lie in (0, 1]".into()));
                }
                if !(f.constraint.epsilon > 0.0) {
                    return Err(Error::Config("problem.constraint.epsilon: must be positive".into()));
                }
                if let DatasetSource::Synthetic { params, .. } = &f.dataset {
                    params.validate()?;
                }
                2
            }
        };
        match &self.calibration {
            CalibrationConfig::PerConstraint { alpha } => {
                ConfidenceLevel::new(*alpha)
                    .and_then(radius_for_level)
                    .map_err(|e| Error::Config(format!("calibration.alpha: {e}")))?;
            }
            CalibrationConfig::Joint { level, draws } => {
                if !(*level > 0.5 && *level < 1.0) {
                    return Err(Error::Config("calibration.level: must lie in (0.5, 1)".into()));
                }
                if *draws < 10_000 {
                    return Err(Error::Config("calibration.draws: at least 1e4 draws are required".into()));
                }
            }
            CalibrationConfig::Manual { rho } => {
                if rho.len() != k || rho.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
                    return Err(Error::Config(format!(
                        "calibration.rho: expected {k} finite nonnegative radii"
                    )));
                }
            }
        }
        for a in &self.alphas {
            ConfidenceLevel::new(*a)
                .and_then(radius_for_level)
                .map_err(|e| Error::Config(format!("alphas: {e}")))?;
        }
        Ok(())
    }

    pub fn constraint_count(&self) -> usize {
        match &self.problem {
            ProblemConfig::Newsvendor(spec) => spec.groups.len(),
            ProblemConfig::Fairness(_) => 2,
        }
    }
}

fn at_path<T: serde::de::DeserializeOwned>(value: Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = match (prefix.is_empty(), inner.as_str()) {
            (true, p) => p.to_string(),
            (false, ".") => prefix.to_string(),
            (false, p) => format!("{prefix}.{p}"),
        };
        Error::Config(format!("{path}: {}", e.inner()))
    })
}

const TAG_KEYS: [&str; 3] = ["kind", "mode", "source"];

/// Recursively overlays `top` onto `base`; objects merge key by key, any
/// other value replaces. An object whose variant tag (`kind`, `mode` or
/// `source`) differs from the base replaces it whole.
pub fn merge(base: &mut Value, top: Value) {
    let retagged = TAG_KEYS
        .iter()
        .any(|k| matches!((base.get(k), top.get(k)), (Some(a), Some(b)) if a != b));
    if retagged {
        *base = top;
        return;
    }
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Sets `dotted.key.path` to `value` inside `root`, creating objects as
/// needed.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("{key}: malformed override key")));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(Error::Config(format!(
                "{}: not an object",
                parts[..i].join(".")
            )));
        }
        let obj = cur.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintOutcome {
    pub pop_value: f64,
    /// Monte Carlo standard error; zero for exact evaluations.
    pub pop_se: f64,
    pub satisfied: bool,
    /// Within two oracle standard errors of zero.
    pub marginal: bool,
}

impl ConstraintOutcome {
    fn new(pop_value: f64, pop_se: f64) -> Self {
        Self {
            pop_value,
            pop_se,
            satisfied: pop_value <= 0.0,
            marginal: pop_se > 0.0 && pop_value.abs() <= 2.0 * pop_se,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub replicate: usize,
    pub seed: u64,
    /// `None` for a successful solve, else the error message.
    pub failure: Option<String>,
    pub theta_hat: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    pub radii: Vec<f64>,
    /// Identified active set (two-stage only).
    pub active: Option<Vec<bool>>,
    pub constraints: Vec<ConstraintOutcome>,
    /// Population objective at θ̂.
    pub objective: f64,
    /// Misclassification rate on the population (fairness only).
    pub error_rate: Option<f64>,
    pub seconds: Option<f64>,
}

impl ReplicateReport {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }

    pub fn jointly_satisfied(&self) -> bool {
        self.constraints.iter().all(|c| c.satisfied)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    /// Constraint index, or `joint`.
    pub constraint_id: String,
    pub satisfied: usize,
    pub marginal: usize,
    pub total: usize,
    pub frequency: f64,
    /// Binomial standard error `√(f(1−f)/total)`.
    pub std_error: f64,
}

impl FrequencyRow {
    fn new(constraint_id: String, satisfied: usize, marginal: usize, total: usize) -> Self {
        let f = if total == 0 {
            f64::NAN
        } else {
            satisfied as f64 / total as f64
        };
        Self {
            constraint_id,
            satisfied,
            marginal,
            total,
            frequency: f,
            std_error: (f * (1.0 - f) / total as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub rows: Vec<FrequencyRow>,
    pub replicates: usize,
    pub failures: usize,
}

impl FrequencyTable {
    /// Per-constraint rows then, for more than one constraint, a joint row.
    pub fn from_reports(reports: &[ReplicateReport], k: usize, count_failures: bool) -> Self {
        let ok: Vec<&ReplicateReport> = reports.iter().filter(|r| r.ok()).collect();
        let failures = reports.len() - ok.len();
        let total = if count_failures { reports.len() } else { ok.len() };
        let mut rows = Vec::with_capacity(k + 1);
        for c in 0..k {
            let sat = ok.iter().filter(|r| r.constraints[c].satisfied).count();
            let marg = ok.iter().filter(|r| r.constraints[c].marginal).count();
            rows.push(FrequencyRow::new(c.to_string(), sat, marg, total));
        }
        if k > 1 {
            let sat = ok.iter().filter(|r| r.jointly_satisfied()).count();
            let marg = ok
                .iter()
                .filter(|r| r.constraints.iter().any(|c| c.marginal))
                .count();
            rows.push(FrequencyRow::new("joint".into(), sat, marg, total));
        }
        Self {
            rows,
            replicates: reports.len(),
            failures,
        }
    }

    pub fn row(&self, id: &str) -> Option<&FrequencyRow> {
        self.rows.iter().find(|r| r.constraint_id == id)
    }

    /// Frequency of constraint `k`.
    pub fn frequency(&self, k: usize) -> f64 {
        self.row(&k.to_string()).map(|r| r.frequency).unwrap_or(f64::NAN)
    }

    /// Joint frequency; the single frequency when there is one constraint.
    pub fn joint_frequency(&self) -> f64 {
        self.row("joint")
            .or_else(|| self.rows.first())
            .map(|r| r.frequency)
            .unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub reports: Vec<ReplicateReport>,
    pub table: FrequencyTable,
}

// ---------------------------------------------------------------------------
// Running

/// Problem data shared by all replicates.
enum Population {
    Newsvendor {
        spec: NewsvendorSpec,
        oracle: PopulationOracle,
    },
    Fairness {
        problem: FairnessProblem,
        full: Arc<LabeledDataset>,
    },
}

impl Population {
    fn build(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.problem {
            ProblemConfig::Newsvendor(spec) => Ok(Population::Newsvendor {
                spec: spec.clone(),
                oracle: PopulationOracle::new(spec, cfg.oracle.draws, cfg.oracle.seed)?,
            }),
            ProblemConfig::Fairness(problem) => {
                let full = match &problem.dataset {
                    DatasetSource::Synthetic { n, seed, params } => synthesize_dataset(*n, *seed, params)?,
                    DatasetSource::Csv { path, schema } => {
                        load_dataset(path, &DatasetSchema::from_json_file(schema)?)?
                    }
                };
                Ok(Population::Fairness {
                    problem: problem.clone(),
                    full: Arc::new(full),
                })
            }
        }
    }

    fn training_program(&self, cfg: &ExperimentConfig, seed: u64) -> Result<RobustProgram> {
        let k = cfg.constraint_count();
        match self {
            Population::Newsvendor { spec, .. } => {
                let samples = newsvendor::sample_demand(spec, cfg.n, seed)?;
                newsvendor::program(spec, samples, &vec![0.0; k])
            }
            Population::Fairness { problem, full } => {
                let train = bootstrap_replicate(full, problem.bootstrap_rate, seed)?;
                fairness_program(&train, &problem.constraint, &vec![0.0; k])
            }
        }
    }

    /// Population constraint outcomes, objective and error rate at θ.
    fn evaluate(&self, theta: &[f64]) -> Result<(Vec<ConstraintOutcome>, f64, Option<f64>)> {
        match self {
            Population::Newsvendor { spec, oracle } => {
                let outcomes = (0..spec.groups.len())
                    .map(|g| {
                        let e = oracle.constraint(theta, g);
                        ConstraintOutcome::new(e.value, e.std_error)
                    })
                    .collect();
                Ok((outcomes, oracle.objective(theta), None))
            }
            Population::Fairness { problem, full } => {
                let c = &problem.constraint;
                let [r0, r1] = group_rates(theta, full, c.kind)?;
                let outcomes = vec![
                    ConstraintOutcome::new((r1 - r0) - c.epsilon, 0.0),
                    ConstraintOutcome::new((r0 - r1) - c.epsilon, 0.0),
                ];
                let loss = LogisticLoss { dim: full.dim() };
                let samples = full.samples();
                let objective =
                    samples.rows().map(|r| loss.value(theta, r)).sum::<f64>() / full.len() as f64;
                Ok((outcomes, objective, Some(error_rate(theta, full))))
            }
        }
    }
}

struct Solved {
    result: SolveResult,
    radii: Vec<f64>,
    active: Option<Vec<bool>>,
}

fn calibrated_radii(
    cfg: &ExperimentConfig,
    program: &RobustProgram,
    pilot: Option<&SolveResult>,
    subset: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    let k = program.len();
    let mut rho = vec![0.0; k];
    match &cfg.calibration {
        CalibrationConfig::PerConstraint { alpha } => {
            let r = radius_for_level(ConfidenceLevel::new(*alpha)?)?;
            subset.iter().for_each(|&i| rho[i] = r);
        }
        CalibrationConfig::Manual { rho: given } => {
            subset.iter().for_each(|&i| rho[i] = given[i]);
        }
        CalibrationConfig::Joint { level, draws } => {
            let pilot = pilot.expect("joint calibration needs a pilot solution");
            if subset.len() == k {
                let corr = estimate_constraint_correlation(program, pilot.theta())?;
                rho = joint_radius_search(&corr, *level, *draws, seed)?.rho;
            } else {
                rho = joint_radii_on_subset(program, pilot.theta(), subset, *level, *draws, seed)?.rho;
            }
        }
    }
    Ok(rho)
}

fn solve_replicate(cfg: &ExperimentConfig, program: &RobustProgram, seed: u64) -> Result<Solved> {
    let mut solver = cfg.solver.clone();
    solver.seed = sub_seed(seed, 2);
    let mc_seed = sub_seed(seed, 1);
    let all: Vec<usize> = (0..program.len()).collect();
    let needs_pilot = matches!(cfg.calibration, CalibrationConfig::Joint { .. });

    match cfg.method {
        Method::Saa => Ok(Solved {
            result: saa_solve(program, &solver)?,
            radii: vec![0.0; program.len()],
            active: None,
        }),
        Method::Robust | Method::Proxy => {
            let pilot = if needs_pilot {
                Some(saa_solve(program, &solver)?)
            } else {
                None
            };
            let radii = calibrated_radii(cfg, program, pilot.as_ref(), &all, mc_seed)?;
            let p = program.with_radii(&radii)?;
            let result = match (&pilot, cfg.method) {
                (Some(pilot), _) => solve_from(&p, &solver, pilot)?,
                (None, Method::Proxy) => crate::solver::proxy_dual_ascent(&p, &solver)?,
                (None, _) => solve(&p, &solver)?,
            };
            Ok(Solved {
                result,
                radii,
                active: None,
            })
        }
        Method::TwoStage => {
            let stage1 = saa_solve(program, &solver)?;
            let active = identify_active_set(&stage1, solver.active_tol);
            let subset: Vec<usize> = (0..program.len()).filter(|&i| active[i]).collect();
            let radii = if subset.is_empty() {
                vec![0.0; program.len()]
            } else {
                calibrated_radii(cfg, program, Some(&stage1), &subset, mc_seed)?
            };
            let (result, radii) = stage_two(program, &stage1, &active, &radii, &solver)?;
            Ok(Solved {
                result,
                radii,
                active: Some(active),
            })
        }
        Method::TwoDataset => {
            let pilot = if needs_pilot {
                Some(saa_solve(program, &solver)?)
            } else {
                None
            };
            let radii = calibrated_radii(cfg, program, pilot.as_ref(), &all, mc_seed)?;
            let p = program.with_radii(&radii)?;
            Ok(Solved {
                result: two_dataset_solve(&p, cfg.split_fraction, &solver)?,
                radii,
                active: None,
            })
        }
    }
}

fn try_replicate(cfg: &ExperimentConfig, population: &Population, r: usize) -> Result<ReplicateReport> {
    let seed = replicate_seed(cfg.master_seed, r);
    let start = Instant::now();
    let program = population.training_program(cfg, seed)?;
    let solved = solve_replicate(cfg, &program, seed)?;
    let (constraints, objective, error_rate) = population.evaluate(solved.result.theta())?;
    Ok(ReplicateReport {
        replicate: r,
        seed,
        failure: None,
        theta_hat: solved.result.state.theta,
        lambda_hat: solved.result.state.lambda,
        radii: solved.radii,
        active: solved.active,
        constraints,
        objective,
        error_rate,
        seconds: cfg.record_seconds.then(|| start.elapsed().as_secs_f64()),
    })
}

fn run_replicate(cfg: &ExperimentConfig, population: &Population, r: usize) -> ReplicateReport {
    let start = Instant::now();
    try_replicate(cfg, population, r).unwrap_or_else(|e| {
        log::warn!("replicate {r} failed: {e}");
        let nan = ConstraintOutcome {
            pop_value: f64::NAN,
            pop_se: f64::NAN,
            satisfied: false,
            marginal: false,
        };
        ReplicateReport {
            replicate: r,
            seed: replicate_seed(cfg.master_seed, r),
            failure: Some(e.to_string()),
            theta_hat: Vec::new(),
            lambda_hat: Vec::new(),
            radii: Vec::new(),
            active: None,
            constraints: vec![nan; cfg.constraint_count()],
            objective: f64::NAN,
            error_rate: None,
            seconds: cfg.record_seconds.then(|| start.elapsed().as_secs_f64()),
        }
    })
}

/// Solves replicate `r` alone; solver errors are returned, not recorded.
pub fn solve_single(cfg: &ExperimentConfig, r: usize) -> Result<ReplicateReport> {
    cfg.validate()?;
    try_replicate(cfg, &Population::build(cfg)?, r)
}

/// Radii the configured calibration assigns on replicate `r`'s training
/// set. Joint calibration solves the SAA pilot first.
pub fn calibrate_single(cfg: &ExperimentConfig, r: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let seed = replicate_seed(cfg.master_seed, r);
    let program = Population::build(cfg)?.training_program(cfg, seed)?;
    let pilot = match cfg.calibration {
        CalibrationConfig::Joint { .. } => {
            let mut solver = cfg.solver.clone();
            solver.seed = sub_seed(seed, 2);
            Some(saa_solve(&program, &solver)?)
        }
        _ => None,
    };
    let all: Vec<usize> = (0..program.len()).collect();
    calibrated_radii(cfg, &program, pilot.as_ref(), &all, sub_seed(seed, 1))
}

/// Runs every replicate and aggregates the frequency table.
///
/// Fails with [`Error::TooManyFailures`] when more than
/// `max_failure_fraction` of the replicates fail.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let population = Population::build(cfg)?;
    let run = || -> Vec<ReplicateReport> {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| run_replicate(cfg, &population, r))
            .collect()
    };
    let reports = match cfg.parallel {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("parallel: {e}")))?
            .install(run),
        None => run(),
    };
    let failed = reports.iter().filter(|r| !r.ok()).count();
    if failed as f64 > cfg.max_failure_fraction * cfg.replicates as f64 {
        return Err(Error::TooManyFailures {
            failed,
            total: cfg.replicates,
            allowed: cfg.max_failure_fraction,
        });
    }
    let table = FrequencyTable::from_reports(&reports, cfg.constraint_count(), cfg.count_failures);
    Ok(ExperimentOutcome { reports, table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub rho: f64,
    pub outcome: ExperimentOutcome,
}

/// One per-constraint run per level in `cfg.alphas`, all on the same
/// replicate seeds.
pub fn run_alpha_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    if cfg.alphas.is_empty() {
        return Err(Error::Config("alphas: the sweep needs at least one level".into()));
    }
    cfg.alphas
        .iter()
        .map(|&alpha| {
            let mut c = cfg.clone();
            c.calibration = CalibrationConfig::PerConstraint { alpha };
            Ok(SweepPoint {
                alpha,
                rho: radius_for_level(ConfidenceLevel::new(alpha)?)?,
                outcome: run_experiment(&c)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    /// `√n · E_{P₀} g(θ̂⁽ʳ⁾) / σ` per successful replicate.
    pub standardized: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    /// `−√ρ`, the mean of the limit law.
    pub expected_mean: f64,
    pub rho: f64,
    pub sigma: f64,
    pub outcome: ExperimentOutcome,
}

/// Standardized population constraint values for a single-constraint
/// newsvendor experiment, to compare with `N(−√ρ, 1)`.
///
/// `sigma` is the population standard deviation of `g(θ*; Z)` at the
/// population solution.
pub fn theorem_check(cfg: &ExperimentConfig, sigma: f64) -> Result<TheoremCheck> {
    if cfg.constraint_count() != 1 || !matches!(cfg.problem, ProblemConfig::Newsvendor(_)) {
        return Err(Error::Config(
            "problem: the theorem check needs a single-constraint newsvendor problem".into(),
        ));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain("population sigma", sigma, "sigma > 0"));
    }
    let rho = match &cfg.calibration {
        CalibrationConfig::PerConstraint { alpha } => radius_for_level(ConfidenceLevel::new(*alpha)?)?,
        CalibrationConfig::Manual { rho } => rho[0],
        CalibrationConfig::Joint { .. } => {
            return Err(Error::Config("calibration: use per_constraint or manual".into()))
        }
    };
    let rho = if cfg.method == Method::Saa { 0.0 } else { rho };
    let outcome = run_experiment(cfg)?;
    let scale = (cfg.n as f64).sqrt() / sigma;
    let standardized: Vec<f64> = outcome
        .reports
        .iter()
        .filter(|r| r.ok())
        .map(|r| scale * r.constraints[0].pop_value)
        .collect();
    let (mean, variance) = empirical_moments(&standardized);
    Ok(TheoremCheck {
        standardized,
        mean,
        variance,
        expected_mean: -rho.sqrt(),
        rho,
        sigma,
        outcome,
    })
}

/// Standard deviation of `g(θ*; Z)` at the single-item population solution.
pub fn single_item_sigma(spec: &NewsvendorSpec) -> Result<f64> {
    let theta = newsvendor::single_item_population_solution(spec)
        .ok_or_else(|| Error::Config("problem: not a single-item exponential spec".into()))?;
    Ok(PopulationOracle::new(spec, 0, 0)?.constraint_sd(&[theta], 0))
}

// ---------------------------------------------------------------------------
// Output

#[derive(Serialize)]
struct ResultRow<'a> {
    replicate: usize,
    constraint_id: usize,
    pop_value: f64,
    pop_se: f64,
    satisfied: bool,
    marginal: bool,
    objective: f64,
    error_rate: Option<f64>,
    failure: Option<&'a str>,
    seconds: Option<f64>,
}

/// One row per replicate and constraint.
pub fn write_results_csv(path: &Path, reports: &[ReplicateReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        for (c, o) in r.constraints.iter().enumerate() {
            w.serialize(ResultRow {
                replicate: r.replicate,
                constraint_id: c,
                pop_value: o.pop_value,
                pop_se: o.pop_se,
                satisfied: o.satisfied,
                marginal: o.marginal,
                objective: r.objective,
                error_rate: r.error_rate,
                failure: r.failure.as_deref(),
                seconds: r.seconds,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Frequency rows of a sweep, one block per level.
pub fn write_sweep_csv(path: &Path, sweep: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "alpha",
        "rho",
        "constraint_id",
        "satisfied",
        "marginal",
        "total",
        "frequency",
        "std_error",
        "failures",
    ])?;
    for p in sweep {
        for row in &p.outcome.table.rows {
            w.write_record([
                p.alpha.to_string(),
                p.rho.to_string(),
                row.constraint_id.clone(),
                row.satisfied.to_string(),
                row.marginal.to_string(),
                row.total.to_string(),
                row.frequency.to_string(),
                row.std_error.to_string(),
                p.outcome.table.failures.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_frequency_csv(path: &Path, table: &FrequencyTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in &table.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}
