//! Dual ascent on the Lagrangian of the robust SAA problem
//!
//! ```text
//! min_θ  F(θ)  s.t.  R_k(θ) ≤ 0,   R_k(θ) = sup_{D(P‖P̂ₙ) ≤ ρ_k/n} E_P g_k(θ; Z)
//! ```
//!
//! Each outer step minimizes `F(θ) + Σ λ_k R_k(θ)` jointly over θ and the
//! inner variables `(μ_k, ν_k)`, then moves `λ` along the constraint values.
//! The inner variables are minimized exactly for every θ, so the θ-step is a
//! box-constrained descent on `F + Σ λ_k R_k` with envelope gradients.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{minimize_box, PgdOptions};
use crate::probstats::empirical_moments;
use crate::program::{sample_values, weighted_gradient, PerSample, RobustProgram};
use crate::robust_eval::{
    dual_objective, robust_sup_dual_from, worst_case_weights_into, ConstraintValues,
    InnerDualVars,
};

/// `η_t = η₀ / (1 + t)^decay`.
///
/// With `adaptive`, multiplier `k` moves by `η_t · s · sign(Ĝ_k)` with a
/// factor `s` shared by all constraints. It doubles until some constraint
/// first changes sign, halves at every change, and afterwards grows again
/// once no sign has changed for a few steps, never past its value at the
/// first change. On piecewise-linear problems, where `Ĝ(λ)` is a
/// staircase, this brackets the jump instead of creeping across flat steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtaSchedule {
    pub eta0: f64,
    pub decay: f64,
    pub adaptive: bool,
}

impl Default for EtaSchedule {
    fn default() -> Self {
        Self {
            eta0: 1.0,
            decay: 0.5,
            adaptive: false,
        }
    }
}

impl EtaSchedule {
    pub fn at(&self, t: usize) -> f64 {
        self.eta0 / (1.0 + t as f64).powf(self.decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub eta: EtaSchedule,
    /// Tolerance of the θ-step (projected-gradient mapping norm).
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Gap tolerance of the `(μ, ν)` minimization.
    pub robust_tol: f64,
    pub dual_tol: f64,
    pub dual_max_iter: usize,
    pub feasibility_tol: f64,
    /// Adds `feasibility_se · σ̂_k/√n` to the feasibility tolerance of
    /// constraint `k`, with `σ̂_k` the sample standard deviation of `g_k` at
    /// the current θ.
    pub feasibility_se: f64,
    pub active_tol: f64,
    /// Start each θ-step from the previous minimizer. When false every
    /// θ-step starts from the same point, which makes the dual function a
    /// deterministic function of λ on nonsmooth problems.
    pub warm_theta: bool,
    pub seed: u64,
    pub initial_lambda: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta: EtaSchedule::default(),
            inner_tol: 1e-8,
            inner_max_iter: 500,
            robust_tol: 1e-10,
            dual_tol: 1e-6,
            dual_max_iter: 5000,
            feasibility_tol: 1e-6,
            feasibility_se: 0.0,
            active_tol: 1e-3,
            warm_theta: true,
            seed: 0,
            initial_lambda: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta.eta0", self.eta.eta0),
            ("inner_tol", self.inner_tol),
            ("robust_tol", self.robust_tol),
            ("dual_tol", self.dual_tol),
            ("feasibility_tol", self.feasibility_tol),
            ("active_tol", self.active_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("solver.{name} must be positive, got {v}")));
            }
        }
        if !(self.feasibility_se >= 0.0 && self.feasibility_se.is_finite()) {
            return Err(Error::Config(format!(
                "solver.feasibility_se must be nonnegative, got {}",
                self.feasibility_se
            )));
        }
        if !(self.eta.decay >= 0.0) {
            return Err(Error::Config(format!(
                "solver.eta.decay must be nonnegative, got {}",
                self.eta.decay
            )));
        }
        if self.inner_max_iter == 0 || self.dual_max_iter == 0 {
            return Err(Error::Config("solver iteration limits must be positive".into()));
        }
        if let Some(l) = &self.initial_lambda {
            if l.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config("solver.initial_lambda must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Solver iterate `(θ, λ, {μ_k, ν_k})`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualState {
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub inner: Vec<InnerDualVars>,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub lambda: Vec<f64>,
    /// Constraint values used for the multiplier update at this iterate.
    pub constraint_values: Vec<f64>,
}

/// Output of one dual-function evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DualFunctionValue {
    pub theta: Vec<f64>,
    pub inner: Vec<InnerDualVars>,
    /// `F(θ) + Σ λ_k R_k(θ)` at the returned point.
    pub value: f64,
    /// `R_k(θ)` for the functions used in the θ-step.
    pub robust_values: Vec<f64>,
    pub inner_converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub state: DualState,
    /// Sample objective `F(θ̂)`.
    pub objective: f64,
    /// Constraint values of the final multiplier update.
    pub constraint_values: Vec<f64>,
    pub trace: Vec<TraceEntry>,
}

impl SolveResult {
    pub fn theta(&self) -> &[f64] {
        &self.state.theta
    }

    pub fn lambda(&self) -> &[f64] {
        &self.state.lambda
    }
}

/// Which per-sample function the θ-step uses for each constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Smoothing {
    True,
    Surrogate,
}

fn step_function(program: &RobustProgram, k: usize, mode: Smoothing) -> &Arc<dyn PerSample> {
    let c = &program.constraints[k];
    match (mode, &c.surrogate) {
        (Smoothing::Surrogate, Some(s)) => s,
        _ => &c.g,
    }
}

/// Warm-start state carried across dual-function evaluations.
#[derive(Debug, Clone)]
struct Warm {
    start: Vec<f64>,
    theta: Vec<f64>,
    inner: Vec<Option<InnerDualVars>>,
}

impl Warm {
    fn new(program: &RobustProgram) -> Self {
        Self::from_theta(program, program.starting_theta())
    }

    fn from_theta(program: &RobustProgram, theta: Vec<f64>) -> Self {
        Self {
            start: theta.clone(),
            theta,
            inner: vec![None; program.len()],
        }
    }
}

fn objective_with_gradient(program: &RobustProgram, theta: &[f64], grad: &mut [f64]) -> f64 {
    let samples = &program.samples;
    let n = samples.len() as f64;
    let scale = 1.0 / n;
    let f = program.objective.as_ref();
    let mut total = 0.0;
    for row in samples.rows() {
        total += f.value(theta, row);
        f.add_gradient(theta, row, scale, grad);
    }
    total / n
}

fn evaluate(
    program: &RobustProgram,
    lambda: &[f64],
    cfg: &SolverConfig,
    mode: Smoothing,
    warm: &mut Warm,
) -> Result<DualFunctionValue> {
    let k_count = program.len();
    let mut values = Vec::with_capacity(program.samples.len());
    let mut weights = Vec::with_capacity(program.samples.len());
    let mut failure: Option<Error> = None;
    let mut inner = warm.inner.clone();

    let lagrangian = |theta: &[f64], grad: &mut [f64]| -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = objective_with_gradient(program, theta, grad);
        for k in 0..k_count {
            if lambda[k] == 0.0 {
                continue;
            }
            let g = step_function(program, k, mode).as_ref();
            sample_values(g, theta, &program.samples, &mut values);
            let cv = match ConstraintValues::new(&values, program.constraints[k].radius) {
                Ok(cv) => cv,
                Err(e) => {
                    failure.get_or_insert(e);
                    return f64::INFINITY;
                }
            };
            let rv = match robust_sup_dual_from(cv, cfg.robust_tol, inner[k]) {
                Ok(rv) => rv,
                Err(e) => {
                    failure.get_or_insert(e);
                    return f64::INFINITY;
                }
            };
            inner[k] = Some(rv.inner);
            worst_case_weights_into(&values, rv.inner, &mut weights);
            let lk = lambda[k];
            weights.iter_mut().for_each(|w| *w *= lk);
            weighted_gradient(g, theta, &program.samples, &weights, grad);
            total += lk * rv.value;
        }
        total
    };

    let opts = PgdOptions {
        tol: cfg.inner_tol,
        max_iter: cfg.inner_max_iter,
        initial_step: 1.0,
        ..PgdOptions::default()
    };
    let x0 = if cfg.warm_theta { &warm.theta } else { &warm.start };
    let res = minimize_box(lagrangian, &program.bounds, x0, opts);
    if let Some(e) = failure {
        return Err(e);
    }

    // Inner variables and robust values at the returned θ for every constraint.
    let mut robust_values = Vec::with_capacity(k_count);
    let mut final_inner = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let g = step_function(program, k, mode).as_ref();
        sample_values(g, &res.x, &program.samples, &mut values);
        let cv = ConstraintValues::new(&values, program.constraints[k].radius)?;
        let rv = robust_sup_dual_from(cv, cfg.robust_tol, inner[k])?;
        inner[k] = Some(rv.inner);
        robust_values.push(rv.value);
        final_inner.push(rv.inner);
    }
    warm.theta = res.x.clone();
    warm.inner = inner;
    let mut scratch = vec![0.0; program.dim()];
    let value = objective_with_gradient(program, &res.x, &mut scratch)
        + lambda
            .iter()
            .zip(&robust_values)
            .map(|(l, r)| l * r)
            .sum::<f64>();
    Ok(DualFunctionValue {
        theta: res.x,
        inner: final_inner,
        value,
        robust_values,
        inner_converged: res.converged,
    })
}

fn check_lambda(program: &RobustProgram, lambda: &[f64]) -> Result<()> {
    if lambda.len() != program.len() {
        return Err(Error::Dimension(format!(
            "{} multipliers for {} constraints",
            lambda.len(),
            program.len()
        )));
    }
    if lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidProgram("multipliers must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Minimizes the Lagrangian over `(θ, μ, ν)` at fixed `λ`.
pub fn evaluate_dual_function(
    program: &RobustProgram,
    lambda: &[f64],
    cfg: &SolverConfig,
) -> Result<DualFunctionValue> {
    program.validate()?;
    cfg.validate()?;
    check_lambda(program, lambda)?;
    let mode = if program.has_non_differentiable() {
        Smoothing::Surrogate
    } else {
        Smoothing::True
    };
    evaluate(program, lambda, cfg, mode, &mut Warm::new(program))
}

/// The outer loop shared by every variant: `signal` maps a dual-function
/// evaluation to the constraint values that drive the multiplier update.
/// Consecutive steps without a sign change after which a bracketed factor
/// grows again.
const ADAPTIVE_PATIENCE: usize = 3;

/// Shared step factor of the adaptive schedule. Constraints sitting at
/// `λ_k = 0` with `Ĝ_k ≤ 0` are idle and do not count as sign changes.
struct SignSteps {
    factor: f64,
    ceiling: f64,
    bracketed: bool,
    streak: usize,
    signs: Vec<f64>,
}

impl SignSteps {
    fn new(k: usize) -> Self {
        Self {
            factor: 1.0,
            ceiling: f64::INFINITY,
            bracketed: false,
            streak: 0,
            signs: vec![0.0; k],
        }
    }

    fn update(&mut self, lambda: &[f64], ghat: &[f64]) -> (f64, &[f64]) {
        let mut flipped = false;
        let mut started = false;
        for k in 0..ghat.len() {
            let sign = if ghat[k] > 0.0 { 1.0 } else { -1.0 };
            let idle = lambda[k] == 0.0 && sign < 0.0;
            if self.signs[k] != 0.0 {
                started = true;
                flipped |= !idle && sign != self.signs[k];
            }
            self.signs[k] = sign;
        }
        if flipped {
            if !self.bracketed {
                self.ceiling = self.factor;
                self.bracketed = true;
            }
            self.streak = 0;
            self.factor *= 0.5;
        } else if started {
            self.streak += 1;
            if !self.bracketed || self.streak >= ADAPTIVE_PATIENCE {
                self.factor = (2.0 * self.factor).min(self.ceiling).min(1e6);
            }
        }
        (self.factor, &self.signs)
    }
}

fn ascend<S>(
    program: &RobustProgram,
    cfg: &SolverConfig,
    mode: Smoothing,
    mut warm: Warm,
    mut signal: S,
) -> Result<SolveResult>
where
    S: FnMut(&DualFunctionValue) -> Result<Vec<f64>>,
{
    program.validate()?;
    cfg.validate()?;
    let k_count = program.len();
    let mut lambda = match &cfg.initial_lambda {
        Some(l) => l.clone(),
        None => vec![0.0; k_count],
    };
    check_lambda(program, &lambda)?;
    let mut trace = Vec::new();
    let mut steps = SignSteps::new(k_count);
    let mut stalled = 0;

    for t in 0..cfg.dual_max_iter {
        let eval = evaluate(program, &lambda, cfg, mode, &mut warm)?;
        let ghat = signal(&eval)?;
        let eta = cfg.eta.at(t);
        let next: Vec<f64> = if cfg.eta.adaptive {
            let (factor, signs) = steps.update(&lambda, &ghat);
            (0..k_count)
                .map(|k| (lambda[k] + eta * factor * signs[k]).max(0.0))
                .collect()
        } else {
            (0..k_count)
                .map(|k| (lambda[k] + eta * ghat[k]).max(0.0))
                .collect()
        };
        let change = next
            .iter()
            .zip(&lambda)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        trace.push(TraceEntry {
            iteration: t,
            lambda: lambda.clone(),
            constraint_values: ghat.clone(),
        });
        let converged = change <= cfg.dual_tol;
        if converged && feasible(program, cfg, &eval.theta, &ghat) {
            let objective = program.objective_mean(&eval.theta);
            return Ok(SolveResult {
                state: DualState {
                    theta: eval.theta,
                    lambda,
                    inner: eval.inner,
                    iteration: t,
                },
                objective,
                constraint_values: ghat,
                trace,
            });
        }
        stalled = if converged && cfg.eta.adaptive { stalled + 1 } else { 0 };
        if stalled >= STALL_LIMIT {
            return Err(Error::NotConverged {
                iterations: t + 1,
                trace: Box::new(trace),
            });
        }
        lambda = next;
    }
    Err(Error::NotConverged {
        iterations: cfg.dual_max_iter,
        trace: Box::new(trace),
    })
}

/// Consecutive settled-but-infeasible adaptive iterations before giving
/// up. The θ-step then alternates between minimizers that each violate a
/// constraint, and no multiplier resolves it.
const STALL_LIMIT: usize = 200;

fn feasible(program: &RobustProgram, cfg: &SolverConfig, theta: &[f64], ghat: &[f64]) -> bool {
    ghat.iter().enumerate().all(|(k, g)| {
        if *g <= cfg.feasibility_tol {
            return true;
        }
        if cfg.feasibility_se == 0.0 {
            return false;
        }
        let values = program.constraint_values(k, theta);
        let (_, var) = empirical_moments(&values);
        *g <= cfg.feasibility_tol + cfg.feasibility_se * (var / values.len() as f64).sqrt()
    })
}

/// Dual ascent for differentiable constraints.
pub fn dual_ascent(program: &RobustProgram, cfg: &SolverConfig) -> Result<SolveResult> {
    if program.has_non_differentiable() {
        return Err(Error::InvalidProgram(
            "program has non-differentiable constraints; use proxy_dual_ascent".into(),
        ));
    }
    ascend(program, cfg, Smoothing::True, Warm::new(program), |e| {
        Ok(e.robust_values.clone())
    })
}

/// Proxy dual ascent: the θ-step uses the surrogates, the multiplier update
/// evaluates the dual objective of the true constraint functions at the
/// proxy's `(θ_t, μ_t, ν_t)`.
pub fn proxy_dual_ascent(program: &RobustProgram, cfg: &SolverConfig) -> Result<SolveResult> {
    proxy_from(program, cfg, Warm::new(program))
}

fn proxy_from(program: &RobustProgram, cfg: &SolverConfig, warm: Warm) -> Result<SolveResult> {
    let mut values = Vec::with_capacity(program.samples.len());
    ascend(program, cfg, Smoothing::Surrogate, warm, |e| {
        Ok((0..program.len())
            .map(|k| {
                if program.constraints[k].surrogate.is_none() {
                    return e.robust_values[k];
                }
                sample_values(
                    program.constraints[k].g.as_ref(),
                    &e.theta,
                    &program.samples,
                    &mut values,
                );
                dual_objective(&values, program.constraints[k].radius, e.inner[k])
            })
            .collect())
    })
}

/// Dual ascent, switching to the proxy variant when any constraint is
/// non-differentiable.
pub fn solve(program: &RobustProgram, cfg: &SolverConfig) -> Result<SolveResult> {
    if program.has_non_differentiable() {
        proxy_dual_ascent(program, cfg)
    } else {
        dual_ascent(program, cfg)
    }
}

/// Same program with every radius set to zero.
pub fn saa_solve(program: &RobustProgram, cfg: &SolverConfig) -> Result<SolveResult> {
    solve(&program.with_radii(&vec![0.0; program.len()])?, cfg)
}

/// Solve warm-started at `from` (its θ and, unless `cfg` sets one, its λ).
pub fn solve_from(program: &RobustProgram, cfg: &SolverConfig, from: &SolveResult) -> Result<SolveResult> {
    let warm = Warm::from_theta(program, from.state.theta.clone());
    let mut cfg = cfg.clone();
    if cfg.initial_lambda.is_none() {
        cfg.initial_lambda = Some(from.state.lambda.clone());
    }
    if program.has_non_differentiable() {
        proxy_from(program, &cfg, warm)
    } else {
        ascend(program, &cfg, Smoothing::True, warm, |e| Ok(e.robust_values.clone()))
    }
}

/// Constraint `k` is active if `λ̂_k > tol` or `|Ĝ_k| ≤ tol`.
pub fn identify_active_set(stage1: &SolveResult, active_tol: f64) -> Vec<bool> {
    stage1
        .state
        .lambda
        .iter()
        .zip(&stage1.constraint_values)
        .map(|(l, g)| *l > active_tol || g.abs() <= active_tol)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageResult {
    pub stage1: SolveResult,
    pub stage2: SolveResult,
    pub active: Vec<bool>,
    /// Radii used in stage 2.
    pub radii: Vec<f64>,
}

/// Stage 2 of the two-stage method: radii `radii[k]` on the active set,
/// zero elsewhere, warm-started at the stage-1 solution.
pub fn stage_two(
    program: &RobustProgram,
    stage1: &SolveResult,
    active: &[bool],
    radii: &[f64],
    cfg: &SolverConfig,
) -> Result<(SolveResult, Vec<f64>)> {
    if active.len() != program.len() || radii.len() != program.len() {
        return Err(Error::Dimension("active set and radii must match the constraints".into()));
    }
    let used: Vec<f64> = active
        .iter()
        .zip(radii)
        .map(|(a, r)| if *a { *r } else { 0.0 })
        .collect();
    if used.iter().all(|r| *r == 0.0) {
        return Ok((stage1.clone(), used));
    }
    let p2 = program.with_radii(&used)?;
    Ok((solve_from(&p2, cfg, stage1)?, used))
}

/// SAA solve, active-set identification, then a robust re-solve with
/// `positive_radii` on the identified constraints.
pub fn two_stage_solve(
    program: &RobustProgram,
    positive_radii: &[f64],
    cfg: &SolverConfig,
) -> Result<TwoStageResult> {
    if positive_radii.len() != program.len() {
        return Err(Error::Dimension(format!(
            "{} radii for {} constraints",
            positive_radii.len(),
            program.len()
        )));
    }
    if positive_radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::InvalidProgram("two-stage radii must be positive".into()));
    }
    let stage1 = saa_solve(program, cfg)?;
    let active = identify_active_set(&stage1, cfg.active_tol);
    let (stage2, radii) = stage_two(program, &stage1, &active, positive_radii, cfg)?;
    Ok(TwoStageResult {
        stage1,
        stage2,
        active,
        radii,
    })
}

/// Splits the samples once (by `cfg.seed`): the θ-step runs on part A and
/// the multiplier update uses the robust constraint values on part B.
pub fn two_dataset_solve(
    program: &RobustProgram,
    split_fraction: f64,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::domain("split fraction", split_fraction, "0 < fraction < 1"));
    }
    let n = program.samples.len();
    let n_a = ((split_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 {
        return Err(Error::InvalidProgram("two-dataset split needs at least two samples".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let part_a = program.with_samples(program.samples.select(&idx[..n_a]));
    let part_b = program.samples.select(&idx[n_a..]);
    let mode = if program.has_non_differentiable() {
        Smoothing::Surrogate
    } else {
        Smoothing::True
    };
    let mut values = Vec::with_capacity(part_b.len());
    let mut inner_b: Vec<Option<InnerDualVars>> = vec![None; program.len()];
    ascend(&part_a, cfg, mode, Warm::new(&part_a), |e| {
        (0..program.len())
            .map(|k| {
                let c = &program.constraints[k];
                sample_values(c.g.as_ref(), &e.theta, &part_b, &mut values);
                let rv = robust_sup_dual_from(
                    ConstraintValues::new(&values, c.radius)?,
                    cfg.robust_tol,
                    inner_b[k],
                )?;
                inner_b[k] = Some(rv.inner);
                Ok(rv.value)
            })
            .collect()
    })
}
