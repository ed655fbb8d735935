//! Resource-constrained newsvendor problems.
//!
//! Orders `θ ∈ [0, 100]^d` against random demand `Z`; the loss
//! `cᵀθ - pᵀ min{Z, θ}` (componentwise min) is minimized subject to one
//! shortage constraint per item group:
//!
//! * single item: `E (Z - θ)₊ - ε ≤ 0`;
//! * several items: `E (‖Z_g‖² - ‖θ_g‖²)₊ - ε_g ≤ 0` for each group `g`.
//!
//! Gaussian demand is not truncated; negative draws keep every function
//! well defined.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probstats::McEstimate;
use crate::program::{ConstraintSpec, ParamBox, PerSample, RobustProgram, SampleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Demand {
    Exponential { mean: f64 },
    /// `N(mean·1, variance·E(r))` with `E(r)` the exchangeable correlation.
    Gaussian {
        mean: f64,
        variance: f64,
        correlation: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewsvendorSpec {
    pub cost: Vec<f64>,
    pub price: Vec<f64>,
    /// Slack per group.
    pub eps: Vec<f64>,
    pub groups: Vec<Vec<usize>>,
    pub demand: Demand,
    #[serde(default = "default_upper")]
    pub theta_upper: f64,
}

fn default_upper() -> f64 {
    100.0
}

impl NewsvendorSpec {
    /// One item, exponential demand with mean 10, `c = 1`, `p = 2`, `ε = 1`.
    pub fn single_item() -> Self {
        Self {
            cost: vec![1.0],
            price: vec![2.0],
            eps: vec![1.0],
            groups: vec![vec![0]],
            demand: Demand::Exponential { mean: 10.0 },
            theta_upper: 100.0,
        }
    }

    /// Four items in groups `{0,1}`, `{2,3}`, Gaussian demand with mean 10,
    /// variance 9 and exchangeable correlation `r`.
    pub fn multi_item(r: f64) -> Self {
        Self {
            cost: vec![1.0; 4],
            price: vec![2.0; 4],
            eps: vec![1.0, 1.0],
            groups: vec![vec![0, 1], vec![2, 3]],
            demand: Demand::Gaussian {
                mean: 10.0,
                variance: 9.0,
                correlation: r,
            },
            theta_upper: 100.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.cost.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.price.len() != d {
            return Err(Error::Config("newsvendor cost and price must have equal nonzero length".into()));
        }
        for j in 0..d {
            if !(self.cost[j] > 0.0) || !(self.price[j] >= self.cost[j]) {
                return Err(Error::Config(format!(
                    "newsvendor item {j}: need cost > 0 and price >= cost"
                )));
            }
        }
        if self.groups.is_empty() || self.eps.len() != self.groups.len() {
            return Err(Error::Config("newsvendor needs one eps per group".into()));
        }
        if self.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("newsvendor eps must be positive".into()));
        }
        let mut seen = vec![false; d];
        for g in &self.groups {
            if g.is_empty() {
                return Err(Error::Config("newsvendor groups must be nonempty".into()));
            }
            for &j in g {
                if j >= d || seen[j] {
                    return Err(Error::Config(format!(
                        "newsvendor groups must partition 0..{d}; item {j} is out of range or repeated"
                    )));
                }
                seen[j] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("newsvendor groups must cover every item".into()));
        }
        if !(self.theta_upper > 0.0 && self.theta_upper.is_finite()) {
            return Err(Error::Config("newsvendor theta_upper must be positive".into()));
        }
        match self.demand {
            Demand::Exponential { mean } => {
                if d != 1 || !(mean > 0.0) {
                    return Err(Error::Config(
                        "exponential demand needs a single item and a positive mean".into(),
                    ));
                }
            }
            Demand::Gaussian {
                variance,
                correlation,
                ..
            } => {
                let lower = if d > 1 { -1.0 / (d as f64 - 1.0) } else { -1.0 };
                if !(variance > 0.0) || !(correlation >= lower && correlation <= 1.0) {
                    return Err(Error::Config(format!(
                        "gaussian demand needs variance > 0 and correlation in [{lower}, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> ParamBox {
        ParamBox::uniform(self.dim(), 0.0, self.theta_upper).expect("validated box")
    }

    fn linear_shortfall(&self) -> bool {
        self.dim() == 1
    }
}

/// `n` IID demand vectors.
pub fn sample_demand(spec: &NewsvendorSpec, n: usize, seed: u64) -> Result<SampleSet> {
    spec.validate()?;
    let d = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    match spec.demand {
        Demand::Exponential { mean } => {
            let exp = Exp::new(1.0 / mean).map_err(|e| Error::Config(e.to_string()))?;
            data.extend((0..n).map(|_| exp.sample(&mut rng)));
        }
        Demand::Gaussian {
            mean,
            variance,
            correlation,
        } => {
            let factor = gaussian_factor(d, variance, correlation)?;
            let mut z = vec![0.0; d];
            for _ in 0..n {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                for i in 0..d {
                    let mut v = mean;
                    for j in 0..=i {
                        v += factor[(i, j)] * z[j];
                    }
                    data.push(v);
                }
            }
        }
    }
    SampleSet::new(d, data)
}

/// Lower Cholesky factor of `variance·E(r)`; perfectly correlated demand
/// falls back to the rank-one factor.
fn gaussian_factor(d: usize, variance: f64, r: f64) -> Result<DMatrix<f64>> {
    let sigma = DMatrix::from_fn(d, d, |i, j| if i == j { variance } else { variance * r });
    match sigma.clone().cholesky() {
        Some(c) => Ok(c.l()),
        None => {
            let eig = nalgebra::SymmetricEigen::new(sigma);
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if min < -1e-8 * variance {
                return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min });
            }
            // Lower-triangular factor of a PSD matrix via an LDLᵀ sweep.
            let mut l = DMatrix::<f64>::zeros(d, d);
            for j in 0..d {
                let mut s = variance;
                for k in 0..j {
                    s -= l[(j, k)] * l[(j, k)];
                }
                let diag = s.max(0.0).sqrt();
                l[(j, j)] = diag;
                for i in j + 1..d {
                    let mut t = variance * r;
                    for k in 0..j {
                        t -= l[(i, k)] * l[(j, k)];
                    }
                    l[(i, j)] = if diag > 1e-12 { t / diag } else { 0.0 };
                }
            }
            Ok(l)
        }
    }
}

/// Per-sample `cᵀθ - pᵀ min{Z, θ}`.
#[derive(Debug, Clone)]
pub struct NewsvendorLoss {
    cost: Vec<f64>,
    price: Vec<f64>,
}

impl PerSample for NewsvendorLoss {
    fn value(&self, theta: &[f64], row: &[f64]) -> f64 {
        let mut v = 0.0;
        for j in 0..theta.len() {
            v += self.cost[j] * theta[j] - self.price[j] * row[j].min(theta[j]);
        }
        v
    }

    fn add_gradient(&self, theta: &[f64], row: &[f64], scale: f64, grad: &mut [f64]) {
        for j in 0..theta.len() {
            let short = if theta[j] < row[j] { self.price[j] } else { 0.0 };
            grad[j] += scale * (self.cost[j] - short);
        }
    }
}

/// Shortage constraint of one group.
#[derive(Debug, Clone)]
pub struct Shortfall {
    items: Vec<usize>,
    eps: f64,
    linear: bool,
}

impl Shortfall {
    fn excess(&self, theta: &[f64], row: &[f64]) -> f64 {
        if self.linear {
            let j = self.items[0];
            row[j] - theta[j]
        } else {
            self.items
                .iter()
                .map(|&j| row[j] * row[j] - theta[j] * theta[j])
                .sum()
        }
    }
}

impl PerSample for Shortfall {
    fn value(&self, theta: &[f64], row: &[f64]) -> f64 {
        self.excess(theta, row).max(0.0) - self.eps
    }

    fn add_gradient(&self, theta: &[f64], row: &[f64], scale: f64, grad: &mut [f64]) {
        if self.excess(theta, row) <= 0.0 {
            return;
        }
        for &j in &self.items {
            grad[j] -= scale * if self.linear { 1.0 } else { 2.0 * theta[j] };
        }
    }
}

pub fn loss_function(spec: &NewsvendorSpec) -> NewsvendorLoss {
    NewsvendorLoss {
        cost: spec.cost.clone(),
        price: spec.price.clone(),
    }
}

pub fn shortfall_function(spec: &NewsvendorSpec, group: usize) -> Shortfall {
    Shortfall {
        items: spec.groups[group].clone(),
        eps: spec.eps[group],
        linear: spec.linear_shortfall(),
    }
}

pub fn objective_samples(spec: &NewsvendorSpec, theta: &[f64], samples: &SampleSet) -> Vec<f64> {
    let f = loss_function(spec);
    samples.rows().map(|r| f.value(theta, r)).collect()
}

pub fn constraint_samples(
    spec: &NewsvendorSpec,
    theta: &[f64],
    samples: &SampleSet,
    group: usize,
) -> Vec<f64> {
    let g = shortfall_function(spec, group);
    samples.rows().map(|r| g.value(theta, r)).collect()
}

/// The robust newsvendor program on `samples` with one radius per group.
/// The search starts at the mean demand.
pub fn program(spec: &NewsvendorSpec, samples: SampleSet, radii: &[f64]) -> Result<RobustProgram> {
    spec.validate()?;
    if radii.len() != spec.groups.len() {
        return Err(Error::Dimension(format!(
            "{} radii for {} groups",
            radii.len(),
            spec.groups.len()
        )));
    }
    let constraints = (0..spec.groups.len())
        .map(|g| {
            ConstraintSpec::smooth(
                format!("shortfall_{g}"),
                Arc::new(shortfall_function(spec, g)),
                radii[g],
            )
        })
        .collect();
    let start = vec![demand_mean(spec).clamp(0.0, spec.theta_upper); spec.dim()];
    RobustProgram::new(Arc::new(loss_function(spec)), constraints, spec.bounds(), samples)?
        .with_initial_theta(start)
}

fn demand_mean(spec: &NewsvendorSpec) -> f64 {
    match spec.demand {
        Demand::Exponential { mean } | Demand::Gaussian { mean, .. } => mean,
    }
}

/// Ground truth for population constraint values.
///
/// Exponential demand uses the closed form `m e^{-θ/m} - ε`. Otherwise a
/// seeded Monte Carlo sample is drawn once; per group the squared norms
/// `‖Z_g‖²` are sorted with suffix sums, so each evaluation is exact for
/// that sample in `O(log N)`.
#[derive(Debug, Clone)]
pub struct PopulationOracle {
    spec: NewsvendorSpec,
    groups: Vec<SortedTail>,
    items: Vec<SortedTail>,
    draws: usize,
}

#[derive(Debug, Clone)]
struct SortedTail {
    sorted: Vec<f64>,
    /// `suffix1[i] = Σ_{j ≥ i} sorted[j]`, likewise for squares.
    suffix1: Vec<f64>,
    suffix2: Vec<f64>,
}

impl SortedTail {
    fn new(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let mut suffix1 = vec![0.0; n + 1];
        let mut suffix2 = vec![0.0; n + 1];
        for i in (0..n).rev() {
            suffix1[i] = suffix1[i + 1] + values[i];
            suffix2[i] = suffix2[i + 1] + values[i] * values[i];
        }
        Self {
            sorted: values,
            suffix1,
            suffix2,
        }
    }

    /// First and second moments of `(W - s)₊`.
    fn excess_moments(&self, s: f64) -> (f64, f64) {
        let n = self.sorted.len() as f64;
        let i = self.sorted.partition_point(|w| *w <= s);
        let count = (self.sorted.len() - i) as f64;
        let m1 = (self.suffix1[i] - s * count) / n;
        let m2 = (self.suffix2[i] - 2.0 * s * self.suffix1[i] + s * s * count) / n;
        (m1, m2.max(0.0))
    }
}

impl PopulationOracle {
    pub fn new(spec: &NewsvendorSpec, draws: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if let Demand::Exponential { .. } = spec.demand {
            return Ok(Self {
                spec: spec.clone(),
                groups: Vec::new(),
                items: Vec::new(),
                draws: 0,
            });
        }
        if draws < 1_000_000 {
            return Err(Error::domain("oracle draws", draws as f64, "at least 1e6 draws"));
        }
        let sample = sample_demand(spec, draws, seed)?;
        let groups = spec
            .groups
            .iter()
            .map(|g| {
                SortedTail::new(
                    sample
                        .rows()
                        .map(|r| g.iter().map(|&j| r[j] * r[j]).sum())
                        .collect(),
                )
            })
            .collect();
        let items = (0..spec.dim()).map(|j| SortedTail::new(sample.column(j))).collect();
        Ok(Self {
            spec: spec.clone(),
            groups,
            items,
            draws,
        })
    }

    pub fn is_exact(&self) -> bool {
        self.draws == 0
    }

    /// `E g_group(θ; Z)` with its standard error (zero when exact).
    pub fn constraint(&self, theta: &[f64], group: usize) -> McEstimate {
        let eps = self.spec.eps[group];
        if let Demand::Exponential { mean } = self.spec.demand {
            return McEstimate {
                value: mean * (-theta[0] / mean).exp() - eps,
                std_error: 0.0,
            };
        }
        let s: f64 = self.spec.groups[group].iter().map(|&j| theta[j] * theta[j]).sum();
        let (m1, m2) = self.groups[group].excess_moments(s);
        McEstimate {
            value: m1 - eps,
            std_error: ((m2 - m1 * m1).max(0.0) / self.draws as f64).sqrt(),
        }
    }

    /// Population standard deviation of `g_group(θ; Z)`.
    pub fn constraint_sd(&self, theta: &[f64], group: usize) -> f64 {
        if let Demand::Exponential { mean } = self.spec.demand {
            let tail = (-theta[0] / mean).exp();
            let m1 = mean * tail;
            let m2 = 2.0 * mean * mean * tail;
            return (m2 - m1 * m1).max(0.0).sqrt();
        }
        let s: f64 = self.spec.groups[group].iter().map(|&j| theta[j] * theta[j]).sum();
        let (m1, m2) = self.groups[group].excess_moments(s);
        (m2 - m1 * m1).max(0.0).sqrt()
    }

    /// `E[cᵀθ - pᵀ min{Z, θ}]`, using `E min(Z, θ) = θ - E(θ - Z)₊`.
    pub fn objective(&self, theta: &[f64]) -> f64 {
        let mut v = 0.0;
        for j in 0..self.spec.dim() {
            let expected_min = match self.spec.demand {
                Demand::Exponential { mean } => mean * (1.0 - (-theta[j] / mean).exp()),
                Demand::Gaussian { .. } => {
                    // E min(Z, θ) = θ - E(θ - Z)₊ and (θ - Z)₊ = (−Z - (−θ))₊.
                    let tail = &self.items[j];
                    let n = tail.sorted.len() as f64;
                    let i = tail.sorted.partition_point(|z| *z < theta[j]);
                    let below = i as f64;
                    let sum_below = tail.suffix1[0] - tail.suffix1[i];
                    theta[j] - (theta[j] * below - sum_below) / n
                }
            };
            v += self.spec.cost[j] * theta[j] - self.spec.price[j] * expected_min;
        }
        v
    }
}

/// `E g(θ; Z)` for one group, drawing a fresh oracle sample when needed.
pub fn population_constraint(
    spec: &NewsvendorSpec,
    theta: &[f64],
    group: usize,
    oracle_draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    Ok(PopulationOracle::new(spec, oracle_draws, seed)?.constraint(theta, group))
}

/// The population solution of the single-item problem, `θ* = m ln(m/ε)`,
/// when the constraint binds.
pub fn single_item_population_solution(spec: &NewsvendorSpec) -> Option<f64> {
    match spec.demand {
        Demand::Exponential { mean } if spec.dim() == 1 => {
            let constrained = mean * (mean / spec.eps[0]).ln();
            let unconstrained = mean * (spec.price[0] / (spec.price[0] - spec.cost[0])).ln();
            Some(constrained.max(unconstrained))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probstats::{correlation_matrix, empirical_moments};

    #[test]
    fn spec_validation() {
        assert!(NewsvendorSpec::single_item().validate().is_ok());
        assert!(NewsvendorSpec::multi_item(0.6).validate().is_ok());
        let mut bad = NewsvendorSpec::multi_item(0.0);
        bad.groups = vec![vec![0, 1], vec![1, 2, 3]];
        assert!(bad.validate().is_err());
        let mut bad = NewsvendorSpec::single_item();
        bad.price = vec![0.5];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn exponential_sample_mean() {
        let s = sample_demand(&NewsvendorSpec::single_item(), 1_000_000, 1).unwrap();
        let (mean, _) = empirical_moments(&s.column(0));
        assert!((mean - 10.0).abs() < 3.0 * 10.0 / 1000.0, "{mean}");
        assert_eq!(s, sample_demand(&NewsvendorSpec::single_item(), 1_000_000, 1).unwrap());
    }

    fn cross_correlation(r: f64) -> f64 {
        let n = 200_000;
        let s = sample_demand(&NewsvendorSpec::multi_item(r), n, 7).unwrap();
        let m = DMatrix::from_fn(n, 2, |i, j| s.row(i)[j * 2]);
        correlation_matrix(&m).unwrap().matrix[(0, 1)]
    }

    #[test]
    fn gaussian_correlations() {
        let tol = 3.0 / (200_000f64).sqrt();
        assert!(cross_correlation(0.0).abs() < tol);
        assert!((cross_correlation(0.6) - 0.6).abs() < tol);
    }

    #[test]
    fn perfectly_correlated_factor() {
        let l = gaussian_factor(3, 9.0, 1.0).unwrap();
        let s = &l * l.transpose();
        assert!((s[(0, 2)] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn objective_examples() {
        let spec = NewsvendorSpec::single_item();
        let s = SampleSet::new(1, vec![10.0, 3.0]).unwrap();
        assert_eq!(objective_samples(&spec, &[0.0], &s), vec![0.0, 0.0]);
        assert_eq!(objective_samples(&spec, &[5.0], &s)[0], -5.0);
    }

    #[test]
    fn objective_mean_matches_closed_form() {
        let spec = NewsvendorSpec::single_item();
        let s = sample_demand(&spec, 1_000_000, 3).unwrap();
        let theta = 12.0;
        let v = objective_samples(&spec, &[theta], &s);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let exact = theta - 2.0 * 10.0 * (1.0 - (-theta / 10.0f64).exp());
        assert!((mean - exact).abs() < 0.05, "{mean} vs {exact}");
    }

    #[test]
    fn constraint_examples() {
        let single = NewsvendorSpec::single_item();
        let s = SampleSet::new(1, vec![4.0, 25.0]).unwrap();
        assert_eq!(constraint_samples(&single, &[1e6], &s, 0), vec![-1.0, -1.0]);
        assert_eq!(constraint_samples(&single, &[0.0], &s, 0), vec![3.0, 24.0]);
        let mut multi = NewsvendorSpec::multi_item(0.0);
        multi.cost = vec![1.0; 2];
        multi.price = vec![2.0; 2];
        multi.groups = vec![vec![0, 1]];
        multi.eps = vec![1.0];
        let s = SampleSet::new(2, vec![3.0, 4.0]).unwrap();
        assert_eq!(constraint_samples(&multi, &[1.0, 2.0], &s, 0), vec![19.0]);
    }

    #[test]
    fn constraint_nonincreasing_in_theta() {
        let spec = NewsvendorSpec::multi_item(0.3);
        let s = sample_demand(&spec, 200, 9).unwrap();
        let base = [8.0, 9.0, 10.0, 11.0];
        for j in 0..4 {
            let mut up = base;
            up[j] += 0.5;
            for g in 0..2 {
                let a = constraint_samples(&spec, &base, &s, g);
                let b = constraint_samples(&spec, &up, &s, g);
                assert!(a.iter().zip(&b).all(|(x, y)| y <= x));
            }
        }
    }

    #[test]
    fn exponential_population_values() {
        let spec = NewsvendorSpec::single_item();
        let oracle = PopulationOracle::new(&spec, 0, 0).unwrap();
        let star = 10.0 * 10.0f64.ln();
        assert!(oracle.constraint(&[star], 0).value.abs() < 1e-12);
        assert_eq!(oracle.constraint(&[0.0], 0).value, 9.0);
        assert!(oracle.constraint(&[10.0 * 2.0f64.ln()], 0).value > 0.0);
        assert!((oracle.constraint_sd(&[star], 0) - 19f64.sqrt()).abs() < 1e-12);
        assert_eq!(single_item_population_solution(&spec), Some(star));
    }

    #[test]
    fn exponential_closed_form_vs_monte_carlo() {
        let spec = NewsvendorSpec::single_item();
        let s = sample_demand(&spec, 10_000_000, 21).unwrap();
        let z = s.column(0);
        for theta in [1.0, 7.5, 15.0, 23.0, 40.0] {
            let v: Vec<f64> = z.iter().map(|x| (x - theta).max(0.0) - 1.0).collect();
            let (m, var) = empirical_moments(&v);
            let se = (var / v.len() as f64).sqrt();
            let exact = 10.0 * (-theta / 10.0f64).exp() - 1.0;
            assert!((m - exact).abs() < 4.0 * se, "theta {theta}: {m} vs {exact}");
        }
    }

    #[test]
    fn gaussian_oracle_consistent_across_seeds() {
        let spec = NewsvendorSpec::multi_item(0.0);
        let theta = [11.0, 11.0, 12.0, 12.0];
        let a = PopulationOracle::new(&spec, 1_000_000, 1).unwrap().constraint(&theta, 0);
        let b = PopulationOracle::new(&spec, 1_000_000, 2).unwrap().constraint(&theta, 0);
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.value - b.value).abs() < 4.0 * se);
        assert!(a.std_error > 0.0);
    }

    #[test]
    fn oracle_matches_direct_average() {
        let spec = NewsvendorSpec::multi_item(0.6);
        let oracle = PopulationOracle::new(&spec, 1_000_000, 5).unwrap();
        let sample = sample_demand(&spec, 1_000_000, 5).unwrap();
        let theta = [9.0, 10.0, 11.0, 12.0];
        for g in 0..2 {
            let v = constraint_samples(&spec, &theta, &sample, g);
            let direct = v.iter().sum::<f64>() / v.len() as f64;
            assert!((oracle.constraint(&theta, g).value - direct).abs() < 1e-9);
        }
        let f = objective_samples(&spec, &theta, &sample);
        let direct = f.iter().sum::<f64>() / f.len() as f64;
        assert!((oracle.objective(&theta) - direct).abs() < 1e-9);
    }
}
