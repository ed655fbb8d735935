//! Fairness-constrained binary classification.
//!
//! A [`LabeledDataset`] holds features (with an intercept column), labels and
//! a binary protected attribute. Rate constraints such as ε-demographic
//! parity are written as two one-sided expected-value constraints whose
//! conditional-rate denominators are replaced by frozen plug-in estimates.
//! The indicator prediction rule `ŷ = 1{θᵀx ≥ 0}` is non-differentiable,
//! so each constraint carries a sigmoid or hinge surrogate for the proxy
//! solver.
//!
//! Sample rows handed to the solver are laid out as `[x₁ … x_d, y, a]`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{minimize_box, PgdOptions};
use crate::program::{ConstraintSpec, ParamBox, PerSample, RobustProgram, SampleSet};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
    groups: Vec<u8>,
    pub feature_names: Vec<String>,
}

impl LabeledDataset {
    /// Row-major `features` with `dim` columns, the last of which should be
    /// the intercept.
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        labels: Vec<u8>,
        groups: Vec<u8>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = labels.len();
        if dim == 0 || features.len() != n * dim || groups.len() != n {
            return Err(Error::Dataset(format!(
                "inconsistent lengths: {} feature values, dim {dim}, {n} labels, {} groups",
                features.len(),
                groups.len()
            )));
        }
        if feature_names.len() != dim {
            return Err(Error::Dataset(format!(
                "{} feature names for {dim} columns",
                feature_names.len()
            )));
        }
        if labels.iter().chain(&groups).any(|v| *v > 1) {
            return Err(Error::Dataset("labels and groups must be 0 or 1".into()));
        }
        for (what, v) in [("label", &labels), ("group", &groups)] {
            let ones = v.iter().filter(|x| **x == 1).count();
            if ones == 0 || ones == n {
                return Err(Error::Dataset(format!("{what} column has a single class")));
            }
        }
        Ok(Self {
            dim,
            features,
            labels,
            groups,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn group(&self, i: usize) -> u8 {
        self.groups[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn groups(&self) -> &[u8] {
        &self.groups
    }

    /// Rows at `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.x(i));
        }
        Self::new(
            self.dim,
            features,
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.groups[i]).collect(),
            self.feature_names.clone(),
        )
    }

    /// Solver rows `[x, y, a]`.
    pub fn samples(&self) -> SampleSet {
        let mut data = Vec::with_capacity(self.len() * (self.dim + 2));
        for i in 0..self.len() {
            data.extend_from_slice(self.x(i));
            data.push(self.labels[i] as f64);
            data.push(self.groups[i] as f64);
        }
        SampleSet::new(self.dim + 2, data).expect("row width is positive")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn predict(theta: &[f64], x: &[f64]) -> u8 {
    (dot(theta, x) >= 0.0) as u8
}

pub fn error_rate(theta: &[f64], data: &LabeledDataset) -> f64 {
    let wrong = (0..data.len())
        .filter(|&i| predict(theta, data.x(i)) != data.label(i))
        .count();
    wrong as f64 / data.len() as f64
}

// ---------------------------------------------------------------------------
// Ingestion

/// Maps a CSV column to {0, 1}. With `positive` set, the cell equals it
/// exactly (after trimming) for class 1; otherwise the cell must parse as
/// 0 or 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryColumn {
    pub column: String,
    #[serde(default)]
    pub positive: Option<String>,
}

impl BinaryColumn {
    fn parse(&self, cell: &str, row: usize) -> Result<u8> {
        let cell = cell.trim();
        match &self.positive {
            Some(p) => Ok((cell == p.trim()) as u8),
            None => match cell {
                "0" => Ok(0),
                "1" => Ok(1),
                _ => Err(Error::Dataset(format!(
                    "row {row}: column {} holds {cell:?}, expected 0 or 1",
                    self.column
                ))),
            },
        }
    }
}

/// Sidecar schema of a CSV dataset.
///
/// Features are the numeric columns in schema order (standardized), then
/// each categorical column one-hot encoded over its levels in sorted
/// order, then an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub label: BinaryColumn,
    /// Protected attribute; class 1 is the advantaged group.
    pub group: BinaryColumn,
    #[serde(default)]
    pub numeric: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl DatasetSchema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Dataset(format!("missing column {name:?}")))
    };
    let label_at = index(&schema.label.column)?;
    let group_at = index(&schema.group.column)?;
    let numeric_at: Vec<usize> = schema.numeric.iter().map(|c| index(c)).collect::<Result<_>>()?;
    let categorical_at: Vec<usize> = schema
        .categorical
        .iter()
        .map(|c| index(c))
        .collect::<Result<_>>()?;

    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); numeric_at.len()];
    let mut categorical: Vec<Vec<String>> = vec![Vec::new(); categorical_at.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        labels.push(schema.label.parse(&record[label_at], row)?);
        groups.push(schema.group.parse(&record[group_at], row)?);
        for (j, &c) in numeric_at.iter().enumerate() {
            let v: f64 = record[c].parse().map_err(|_| {
                Error::Dataset(format!(
                    "row {row}: column {} holds {:?}, expected a number",
                    schema.numeric[j], &record[c]
                ))
            })?;
            numeric[j].push(v);
        }
        for (j, &c) in categorical_at.iter().enumerate() {
            categorical[j].push(record[c].to_string());
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Dataset("no data rows".into()));
    }

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for (j, col) in numeric.iter().enumerate() {
        columns.push(standardize(col));
        names.push(schema.numeric[j].clone());
    }
    for (j, col) in categorical.iter().enumerate() {
        let levels: BTreeSet<&str> = col.iter().map(|s| s.as_str()).collect();
        for level in levels {
            columns.push(col.iter().map(|s| (s == level) as u8 as f64).collect());
            names.push(format!("{}={level}", schema.categorical[j]));
        }
    }
    columns.push(vec![1.0; n]);
    names.push("intercept".into());

    let dim = columns.len();
    let mut features = Vec::with_capacity(n * dim);
    for i in 0..n {
        features.extend(columns.iter().map(|c| c[i]));
    }
    LabeledDataset::new(dim, features, labels, groups, names)
}

/// Zero mean, unit (population) variance; a constant column maps to zeros.
fn standardize(col: &[f64]) -> Vec<f64> {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 1e-24 {
        return vec![0.0; col.len()];
    }
    let sd = var.sqrt();
    col.iter().map(|v| (v - mean) / sd).collect()
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Generator of a two-group, two-label dataset. Each (group, label) cell is
/// an equal mixture of two unit-variance Gaussian clusters centred at
/// `label_separation·y·e₁ + group_shift·a·e₂ ± cluster_spread·e_last`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub features: usize,
    /// P(A = 1).
    pub group_fraction: f64,
    /// P(Y = 1 | A = 0).
    pub base_rate_group0: f64,
    /// P(Y = 1 | A = 1).
    pub base_rate_group1: f64,
    pub label_separation: f64,
    pub group_shift: f64,
    pub cluster_spread: f64,
    /// Append A itself as a feature.
    pub group_feature: bool,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            features: 4,
            group_fraction: 0.67,
            base_rate_group0: 0.15,
            base_rate_group1: 0.35,
            label_separation: 1.5,
            group_shift: 0.5,
            cluster_spread: 1.0,
            group_feature: true,
        }
    }
}

impl SyntheticParams {
    /// Equal groups with base rate one half in each.
    pub fn balanced() -> Self {
        Self {
            group_fraction: 0.5,
            base_rate_group0: 0.5,
            base_rate_group1: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(Error::Config("synthetic.features must be at least 1".into()));
        }
        for (name, p) in [
            ("group_fraction", self.group_fraction),
            ("base_rate_group0", self.base_rate_group0),
            ("base_rate_group1", self.base_rate_group1),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("synthetic.{name} must lie in (0, 1), got {p}")));
            }
        }
        Ok(())
    }
}

pub fn synthesize_dataset(n: usize, seed: u64, params: &SyntheticParams) -> Result<LabeledDataset> {
    if n < 100 {
        return Err(Error::domain("synthetic size", n as f64, "n >= 100"));
    }
    params.validate()?;
    let k = params.features;
    let dim = k + params.group_feature as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let mut z = vec![0.0; k];
    for _ in 0..n {
        let a = rng.random_bool(params.group_fraction) as u8;
        let rate = if a == 1 {
            params.base_rate_group1
        } else {
            params.base_rate_group0
        };
        let y = rng.random_bool(rate) as u8;
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        z[0] += params.label_separation * y as f64;
        if k > 1 {
            z[1] += params.group_shift * a as f64;
        } else {
            z[0] += params.group_shift * a as f64;
        }
        z[k - 1] += params.cluster_spread * side;
        features.extend_from_slice(&z);
        if params.group_feature {
            features.push(a as f64);
        }
        features.push(1.0);
        labels.push(y);
        groups.push(a);
    }
    let mut names: Vec<String> = (0..k).map(|j| format!("x{j}")).collect();
    if params.group_feature {
        names.push("group".into());
    }
    names.push("intercept".into());
    LabeledDataset::new(dim, features, labels, groups, names)
}

// ---------------------------------------------------------------------------
// Logistic model

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Log-loss of `σ(θᵀx)` against `y`, one row `[x, y, a]`.
#[derive(Debug, Clone, Copy)]
pub struct LogisticLoss {
    pub dim: usize,
}

impl PerSample for LogisticLoss {
    fn value(&self, theta: &[f64], row: &[f64]) -> f64 {
        let t = dot(theta, &row[..self.dim]);
        if row[self.dim] > 0.5 {
            softplus(-t)
        } else {
            softplus(t)
        }
    }

    fn add_gradient(&self, theta: &[f64], row: &[f64], scale: f64, grad: &mut [f64]) {
        let x = &row[..self.dim];
        let r = sigmoid(dot(theta, x)) - row[self.dim];
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += scale * r * xi;
        }
    }
}

pub fn logistic_objective_samples(theta: &[f64], data: &LabeledDataset) -> Vec<f64> {
    let loss = LogisticLoss { dim: data.dim() };
    data.samples().rows().map(|r| loss.value(theta, r)).collect()
}

/// Gradient of the mean log-loss.
pub fn logistic_gradient(theta: &[f64], data: &LabeledDataset) -> Vec<f64> {
    let loss = LogisticLoss { dim: data.dim() };
    let mut grad = vec![0.0; data.dim()];
    let scale = 1.0 / data.len() as f64;
    for r in data.samples().rows() {
        loss.add_gradient(theta, r, scale, &mut grad);
    }
    grad
}

/// Unconstrained logistic regression over `[-bound, bound]^d`.
pub fn fit_logistic(data: &LabeledDataset, bound: f64) -> Result<Vec<f64>> {
    let samples = data.samples();
    let loss = LogisticLoss { dim: data.dim() };
    let scale = 1.0 / data.len() as f64;
    let bounds = ParamBox::uniform(data.dim(), -bound, bound)?;
    let res = minimize_box(
        |theta, grad| {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut total = 0.0;
            for r in samples.rows() {
                total += loss.value(theta, r);
                loss.add_gradient(theta, r, scale, grad);
            }
            total * scale
        },
        &bounds,
        &vec![0.0; data.dim()],
        PgdOptions {
            tol: 1e-7,
            max_iter: 2000,
            ..PgdOptions::default()
        },
    );
    Ok(res.x)
}

// ---------------------------------------------------------------------------
// Rate constraints

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    DemographicParity,
    EqualOpportunity,
    FprParity,
    TprParity,
}

impl RateKind {
    /// Whether row `(y)` belongs to the conditioning event.
    fn conditions(&self, y: u8) -> bool {
        match self {
            RateKind::DemographicParity => true,
            RateKind::EqualOpportunity | RateKind::TprParity => y == 1,
            RateKind::FprParity => y == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Surrogate {
    Sigmoid { a: f64 },
    Hinge,
}

impl Default for Surrogate {
    fn default() -> Self {
        Surrogate::Sigmoid { a: 2.0 }
    }
}

impl Surrogate {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Surrogate::Sigmoid { a } => sigmoid(a * t),
            Surrogate::Hinge => (t + 1.0).max(0.0),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            Surrogate::Sigmoid { a } => {
                let s = sigmoid(a * t);
                a * s * (1.0 - s)
            }
            Surrogate::Hinge => {
                if t > -1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn surrogate_value(kind: Surrogate, t: f64) -> f64 {
    kind.value(t)
}

/// A one-sided rate constraint `s·(r₁ − r₀) − ε ≤ 0` with frozen plug-in
/// denominators `p̂_a = P̂(A = a, condition)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateConstraintSpec {
    pub kind: RateKind,
    pub epsilon: f64,
    /// `+1` for "group 1 minus group 0", `-1` for the reverse.
    pub direction: f64,
    pub surrogate: Surrogate,
    /// `[p̂₀, p̂₁]`.
    pub plug_in_rates: [f64; 2],
}

impl RateConstraintSpec {
    /// Both sides of `|r₁ − r₀| ≤ ε`, with denominators estimated on `data`.
    pub fn both_sides(
        kind: RateKind,
        epsilon: f64,
        surrogate: Surrogate,
        data: &LabeledDataset,
    ) -> Result<[Self; 2]> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::domain("fairness epsilon", epsilon, "epsilon > 0"));
        }
        let rates = plug_in_rates(kind, data)?;
        let side = |direction| Self {
            kind,
            epsilon,
            direction,
            surrogate,
            plug_in_rates: rates,
        };
        Ok([side(1.0), side(-1.0)])
    }

    fn weight(&self, y: u8, a: u8) -> f64 {
        if !self.kind.conditions(y) {
            return 0.0;
        }
        if a == 1 {
            self.direction / self.plug_in_rates[1]
        } else {
            -self.direction / self.plug_in_rates[0]
        }
    }

    pub fn name(&self) -> String {
        let kind = match self.kind {
            RateKind::DemographicParity => "dp",
            RateKind::EqualOpportunity => "eo",
            RateKind::FprParity => "fpr",
            RateKind::TprParity => "tpr",
        };
        let side = if self.direction > 0.0 { "1-0" } else { "0-1" };
        format!("{kind}[{side}]")
    }
}

/// `[P̂(A=0, C), P̂(A=1, C)]` for the conditioning event `C` of `kind`.
pub fn plug_in_rates(kind: RateKind, data: &LabeledDataset) -> Result<[f64; 2]> {
    let mut counts = [0usize; 2];
    for i in 0..data.len() {
        if kind.conditions(data.label(i)) {
            counts[data.group(i) as usize] += 1;
        }
    }
    let n = data.len() as f64;
    let rates = [counts[0] as f64 / n, counts[1] as f64 / n];
    if counts.contains(&0) {
        return Err(Error::Dataset(format!(
            "{kind:?}: empty conditioning cell (counts {counts:?})"
        )));
    }
    Ok(rates)
}

/// Per-row value `s·(1{ŷ=1,A=1,C}/p̂₁ − 1{ŷ=1,A=0,C}/p̂₀) − ε`.
#[derive(Debug, Clone)]
pub struct IndicatorRate {
    pub spec: RateConstraintSpec,
    pub dim: usize,
}

impl PerSample for IndicatorRate {
    fn value(&self, theta: &[f64], row: &[f64]) -> f64 {
        let d = self.dim;
        let w = self.spec.weight(row[d] as u8, row[d + 1] as u8);
        let yhat = predict(theta, &row[..d]) as f64;
        w * yhat - self.spec.epsilon
    }

    fn add_gradient(&self, _: &[f64], _: &[f64], _: f64, _: &mut [f64]) {}
}

/// The indicator `1{θᵀx ≥ 0}` replaced by the surrogate of `spec`.
#[derive(Debug, Clone)]
pub struct SurrogateRate {
    pub spec: RateConstraintSpec,
    pub dim: usize,
}

impl PerSample for SurrogateRate {
    fn value(&self, theta: &[f64], row: &[f64]) -> f64 {
        let d = self.dim;
        let w = self.spec.weight(row[d] as u8, row[d + 1] as u8);
        w * self.spec.surrogate.value(dot(theta, &row[..d])) - self.spec.epsilon
    }

    fn add_gradient(&self, theta: &[f64], row: &[f64], scale: f64, grad: &mut [f64]) {
        let d = self.dim;
        let w = self.spec.weight(row[d] as u8, row[d + 1] as u8);
        if w == 0.0 {
            return;
        }
        let x = &row[..d];
        let c = scale * w * self.spec.surrogate.derivative(dot(theta, x));
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += c * xi;
        }
    }
}

pub fn rate_constraint_samples(
    spec: &RateConstraintSpec,
    theta: &[f64],
    data: &LabeledDataset,
) -> Vec<f64> {
    let g = IndicatorRate {
        spec: spec.clone(),
        dim: data.dim(),
    };
    data.samples().rows().map(|r| g.value(theta, r)).collect()
}

/// `[r₀, r₁]`, the conditional positive-prediction rates per group.
pub fn group_rates(theta: &[f64], data: &LabeledDataset, kind: RateKind) -> Result<[f64; 2]> {
    let mut positive = [0usize; 2];
    let mut total = [0usize; 2];
    for i in 0..data.len() {
        if kind.conditions(data.label(i)) {
            let a = data.group(i) as usize;
            total[a] += 1;
            positive[a] += predict(theta, data.x(i)) as usize;
        }
    }
    if total.contains(&0) {
        return Err(Error::Dataset(format!(
            "{kind:?}: empty conditioning cell (counts {total:?})"
        )));
    }
    Ok([
        positive[0] as f64 / total[0] as f64,
        positive[1] as f64 / total[1] as f64,
    ])
}

/// `|r₁ − r₀|` on `full`, the stand-in population.
pub fn population_fairness_gap(theta: &[f64], full: &LabeledDataset, kind: RateKind) -> Result<f64> {
    let [r0, r1] = group_rates(theta, full, kind)?;
    Ok((r1 - r0).abs())
}

/// `⌊rate·n⌋` rows drawn with replacement.
pub fn bootstrap_replicate(full: &LabeledDataset, rate: f64, seed: u64) -> Result<LabeledDataset> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::domain("bootstrap rate", rate, "0 < rate <= 1"));
    }
    let m = ((rate * full.len() as f64).floor() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..full.len())).collect();
    full.select(&idx)
}

/// Fairness problem settings shared by programs and the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairnessConstraintConfig {
    pub kind: RateKind,
    pub epsilon: f64,
    pub surrogate: Surrogate,
    /// Box half-width for θ.
    pub theta_bound: f64,
}

impl Default for FairnessConstraintConfig {
    fn default() -> Self {
        Self {
            kind: RateKind::DemographicParity,
            epsilon: 0.03,
            surrogate: Surrogate::default(),
            theta_bound: 10.0,
        }
    }
}

/// Logistic objective with both sides of the rate bound as constraints.
/// Starts from the unconstrained logistic fit.
pub fn fairness_program(
    data: &LabeledDataset,
    cfg: &FairnessConstraintConfig,
    radii: &[f64],
) -> Result<RobustProgram> {
    if radii.len() != 2 {
        return Err(Error::Dimension(format!("{} radii for 2 fairness constraints", radii.len())));
    }
    let d = data.dim();
    let sides = RateConstraintSpec::both_sides(cfg.kind, cfg.epsilon, cfg.surrogate, data)?;
    let constraints = sides
        .into_iter()
        .zip(radii)
        .map(|(spec, &r)| {
            ConstraintSpec::with_surrogate(
                spec.name(),
                Arc::new(IndicatorRate {
                    spec: spec.clone(),
                    dim: d,
                }),
                Arc::new(SurrogateRate { spec, dim: d }),
                r,
            )
        })
        .collect();
    let start = fit_logistic(data, cfg.theta_bound)?;
    RobustProgram::new(
        Arc::new(LogisticLoss { dim: d }),
        constraints,
        ParamBox::uniform(d, -cfg.theta_bound, cfg.theta_bound)?,
        data.samples(),
    )?
    .with_initial_theta(start)
}

/// Counts of each (group, label) cell, keyed `(a, y)`.
pub fn cell_counts(data: &LabeledDataset) -> BTreeMap<(u8, u8), usize> {
    let mut m = BTreeMap::new();
    for i in 0..data.len() {
        *m.entry((data.group(i), data.label(i))).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn hand_dataset() -> LabeledDataset {
        // x = [score, intercept]; predictions 1{score ≥ 0}.
        let rows = [
            (1.0, 1, 1),
            (-1.0, 0, 1),
            (2.0, 1, 1),
            (0.5, 0, 0),
            (-0.5, 1, 0),
            (-2.0, 0, 0),
        ];
        let mut f = Vec::new();
        for (s, _, _) in rows {
            f.extend_from_slice(&[s, 1.0]);
        }
        LabeledDataset::new(
            2,
            f,
            rows.iter().map(|r| r.1).collect(),
            rows.iter().map(|r| r.2).collect(),
            vec!["score".into(), "intercept".into()],
        )
        .unwrap()
    }

    const SCORE: [f64; 2] = [1.0, 0.0];

    #[test]
    fn dataset_invariants() {
        assert!(LabeledDataset::new(1, vec![1.0; 3], vec![0, 1, 1], vec![0, 1], vec!["c".into()]).is_err());
        assert!(LabeledDataset::new(1, vec![1.0; 2], vec![1, 1], vec![0, 1], vec!["c".into()]).is_err());
        assert!(LabeledDataset::new(1, vec![1.0; 2], vec![0, 1], vec![0, 0], vec!["c".into()]).is_err());
        assert!(LabeledDataset::new(1, vec![1.0; 2], vec![0, 2], vec![0, 1], vec!["c".into()]).is_err());
    }

    #[test]
    fn loads_and_encodes_hand_csv() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("d.csv");
        let mut f = std::fs::File::create(&csv_path).unwrap();
        writeln!(f, "age,work,sex,income,unused").unwrap();
        writeln!(f, "20,private,Male,>50K,x").unwrap();
        writeln!(f, "30,gov,Female,<=50K,x").unwrap();
        writeln!(f, "40,private,Female,>50K,x").unwrap();
        writeln!(f, "50,self,Male,<=50K,x").unwrap();
        drop(f);
        let schema: DatasetSchema = serde_json::from_str(
            r#"{"label": {"column": "income", "positive": ">50K"},
                "group": {"column": "sex", "positive": "Male"},
                "numeric": ["age"], "categorical": ["work"]}"#,
        )
        .unwrap();
        let ds = load_dataset(&csv_path, &schema).unwrap();
        // age: mean 35, population sd √125.
        let s = 125f64.sqrt();
        let expected = [
            [-15.0 / s, 0.0, 1.0, 0.0, 1.0],
            [-5.0 / s, 1.0, 0.0, 0.0, 1.0],
            [5.0 / s, 0.0, 1.0, 0.0, 1.0],
            [15.0 / s, 0.0, 0.0, 1.0, 1.0],
        ];
        assert_eq!(ds.dim(), 5);
        assert_eq!(
            ds.feature_names,
            ["age", "work=gov", "work=private", "work=self", "intercept"]
        );
        for (i, row) in expected.iter().enumerate() {
            for (a, b) in ds.x(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-12, "row {i}: {:?}", ds.x(i));
            }
        }
        assert_eq!(ds.labels(), &[1, 0, 1, 0]);
        assert_eq!(ds.groups(), &[1, 0, 0, 1]);

        let mut missing = schema.clone();
        missing.label.column = "salary".into();
        let err = load_dataset(&csv_path, &missing).unwrap_err().to_string();
        assert!(err.contains("salary"), "{err}");
    }

    #[test]
    fn constant_numeric_column_maps_to_zeros() {
        assert_eq!(standardize(&[3.0, 3.0, 3.0]), vec![0.0; 3]);
        let z = standardize(&[1.0, 2.0, 3.0]);
        assert!((z.iter().sum::<f64>()).abs() < 1e-12);
        assert!((z.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let p = SyntheticParams::balanced();
        let n = 40_000;
        let a = synthesize_dataset(n, 5, &p).unwrap();
        assert_eq!(a, synthesize_dataset(n, 5, &p).unwrap());
        assert_ne!(a, synthesize_dataset(n, 6, &p).unwrap());
        let tol = 3.0 / (n as f64).sqrt();
        for g in 0..2u8 {
            let (mut pos, mut tot) = (0.0, 0.0);
            for i in 0..n {
                if a.group(i) == g {
                    tot += 1.0;
                    pos += a.label(i) as f64;
                }
            }
            assert!((pos / tot - 0.5).abs() < 2.0 * tol, "group {g}: {}", pos / tot);
        }
        assert!(synthesize_dataset(50, 1, &p).is_err());
    }

    #[test]
    fn logistic_fit_reaches_best_threshold_accuracy() {
        let p = SyntheticParams {
            features: 1,
            group_fraction: 0.5,
            base_rate_group0: 0.4,
            base_rate_group1: 0.4,
            label_separation: 2.0,
            group_shift: 0.0,
            cluster_spread: 0.0,
            group_feature: false,
        };
        let ds = synthesize_dataset(5000, 9, &p).unwrap();
        let theta = fit_logistic(&ds, 20.0).unwrap();
        let acc = 1.0 - error_rate(&theta, &ds);

        // Exhaustive threshold sweep over the sorted feature.
        let mut pts: Vec<(f64, u8)> = (0..ds.len()).map(|i| (ds.x(i)[0], ds.label(i))).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let positives = pts.iter().filter(|p| p.1 == 1).count();
        // Threshold below every point predicts all ones.
        let mut running = positives as i64;
        let mut best = running;
        for p in &pts {
            running += if p.1 == 0 { 1 } else { -1 };
            best = best.max(running);
        }
        let best_acc = best as f64 / ds.len() as f64;
        assert!(acc >= best_acc - 0.005, "logistic {acc} vs sweep {best_acc}");
        // Bayes rule for equal-variance Gaussians at this prior.
        assert!(best_acc > 0.8);
    }

    #[test]
    fn logistic_values_and_gradient() {
        let ds = synthesize_dataset(300, 2, &SyntheticParams::default()).unwrap();
        let zero = vec![0.0; ds.dim()];
        for v in logistic_objective_samples(&zero, &ds) {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let theta: Vec<f64> = (0..ds.dim()).map(|j| 0.3 - 0.1 * j as f64).collect();
        let g = logistic_gradient(&theta, &ds);
        let mean = |t: &[f64]| {
            let v = logistic_objective_samples(t, &ds);
            v.iter().sum::<f64>() / v.len() as f64
        };
        for j in 0..ds.dim() {
            let h = 1e-6;
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (mean(&up) - mean(&dn)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3), "coord {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn loss_decreases_along_gradient() {
        let ds = synthesize_dataset(500, 3, &SyntheticParams::default()).unwrap();
        let mut theta = vec![0.0; ds.dim()];
        let mean = |t: &[f64]| logistic_objective_samples(t, &ds).iter().sum::<f64>() / ds.len() as f64;
        let mut last = mean(&theta);
        for _ in 0..20 {
            let g = logistic_gradient(&theta, &ds);
            theta.iter_mut().zip(&g).for_each(|(t, gi)| *t -= 0.5 * gi);
            let now = mean(&theta);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn surrogate_values() {
        let s = Surrogate::Sigmoid { a: 2.0 };
        assert_eq!(s.value(0.0), 0.5);
        assert!((s.value(1.0) - 0.880_797_077_977_882_3).abs() < 1e-15);
        assert_eq!(Surrogate::Hinge.value(-1.0), 0.0);
        assert_eq!(surrogate_value(Surrogate::Hinge, 0.5), 1.5);
        let mut last = 0.0;
        for i in -400..=400 {
            let t = i as f64 / 40.0;
            let v = s.value(t);
            assert!(v > 0.0 && v < 1.0 && v >= last);
            last = v;
            let ind = (t > 0.0) as u8 as f64;
            assert!(Surrogate::Hinge.value(t) >= ind);
        }
    }

    #[test]
    fn hand_rate_constraint_values() {
        let ds = hand_dataset();
        // Group 1: rows 0,1,2 (p̂₁ = 1/2); group 0: rows 3,4,5 (p̂₀ = 1/2).
        // Predictions: 1,0,1,1,0,0.
        let [dp, rev] = RateConstraintSpec::both_sides(
            RateKind::DemographicParity,
            0.1,
            Surrogate::default(),
            &ds,
        )
        .unwrap();
        assert_eq!(dp.plug_in_rates, [0.5, 0.5]);
        let v = rate_constraint_samples(&dp, &SCORE, &ds);
        let expected = [2.0 - 0.1, -0.1, 2.0 - 0.1, -2.0 - 0.1, -0.1, -0.1];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = rate_constraint_samples(&rev, &SCORE, &ds);
        assert!((w[3] - (2.0 - 0.1)).abs() < 1e-12);

        // Equal opportunity conditions on y = 1: rows 0, 2 (A=1) and 4 (A=0).
        let [eo, _] =
            RateConstraintSpec::both_sides(RateKind::EqualOpportunity, 0.1, Surrogate::Hinge, &ds)
                .unwrap();
        assert_eq!(eo.plug_in_rates, [1.0 / 6.0, 2.0 / 6.0]);
        let v = rate_constraint_samples(&eo, &SCORE, &ds);
        assert!((v[0] - (3.0 - 0.1)).abs() < 1e-12);
        assert!((v[3] + 0.1).abs() < 1e-12);
        assert!((v[4] + 0.1).abs() < 1e-12);
        let mean = v.iter().sum::<f64>() / 6.0;
        // r₁ = 1, r₀ = 0.
        assert!((mean - (1.0 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn all_zero_classifier_gives_minus_epsilon() {
        let ds = synthesize_dataset(400, 1, &SyntheticParams::default()).unwrap();
        let mut theta = vec![0.0; ds.dim()];
        *theta.last_mut().unwrap() = -1.0;
        for spec in RateConstraintSpec::both_sides(RateKind::DemographicParity, 0.05, Surrogate::Hinge, &ds)
            .unwrap()
        {
            let v = rate_constraint_samples(&spec, &theta, &ds);
            assert!((v.iter().sum::<f64>() / v.len() as f64 + 0.05).abs() < 1e-12);
        }
        assert_eq!(population_fairness_gap(&theta, &ds, RateKind::DemographicParity).unwrap(), 0.0);
        *theta.last_mut().unwrap() = 1.0;
        assert_eq!(population_fairness_gap(&theta, &ds, RateKind::DemographicParity).unwrap(), 0.0);
    }

    #[test]
    fn gap_on_hand_and_symmetric_data() {
        let ds = hand_dataset();
        // r₁ = 2/3, r₀ = 1/3.
        let gap = population_fairness_gap(&SCORE, &ds, RateKind::DemographicParity).unwrap();
        assert!((gap - 1.0 / 3.0).abs() < 1e-15);
        // FPR: y = 0 rows 1 (A=1, ŷ=0), 3 (A=0, ŷ=1), 5 (A=0, ŷ=0).
        let gap = population_fairness_gap(&SCORE, &ds, RateKind::FprParity).unwrap();
        assert!((gap - 0.5).abs() < 1e-15);

        let mut f = Vec::new();
        for s in [1.0, -1.0, 1.0, -1.0] {
            f.extend_from_slice(&[s, 1.0]);
        }
        let sym = LabeledDataset::new(2, f, vec![1, 0, 1, 0], vec![1, 1, 0, 0], vec!["s".into(), "c".into()])
            .unwrap();
        assert_eq!(population_fairness_gap(&SCORE, &sym, RateKind::DemographicParity).unwrap(), 0.0);
    }

    #[test]
    fn bootstrap_draws_from_original_rows() {
        let ds = synthesize_dataset(200, 4, &SyntheticParams::balanced()).unwrap();
        let b = bootstrap_replicate(&ds, 1.0, 1).unwrap();
        assert_eq!(b.len(), 200);
        for i in 0..b.len() {
            assert!((0..ds.len()).any(|j| ds.x(j) == b.x(i)));
        }
        assert_ne!(b, bootstrap_replicate(&ds, 1.0, 2).unwrap());
        assert_eq!(bootstrap_replicate(&ds, 0.5, 3).unwrap().len(), 100);
        assert!(bootstrap_replicate(&ds, 0.0, 3).is_err());
        assert!(bootstrap_replicate(&ds, 1.5, 3).is_err());
    }

    #[test]
    fn bootstrap_row_frequencies_are_uniform() {
        // Multinomial oracle: each of n rows is drawn Binomial(m, 1/n) times.
        let n = 100;
        let ds = synthesize_dataset(n, 8, &SyntheticParams::balanced()).unwrap();
        let mut hits = vec![0usize; n];
        let reps = 400;
        for seed in 0..reps {
            let b = bootstrap_replicate(&ds, 1.0, seed).unwrap();
            for i in 0..b.len() {
                let j = (0..n).position(|j| ds.x(j) == b.x(i)).unwrap();
                hits[j] += 1;
            }
        }
        let m = (reps as usize * n) as f64;
        let p = 1.0 / n as f64;
        let sd = (p * (1.0 - p) / m).sqrt();
        for h in hits {
            assert!((h as f64 / m - p).abs() < 5.0 * sd, "{h}");
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let ds = synthesize_dataset(200, 6, &SyntheticParams::default()).unwrap();
        let [spec, _] =
            RateConstraintSpec::both_sides(RateKind::DemographicParity, 0.03, Surrogate::default(), &ds)
                .unwrap();
        let g = SurrogateRate {
            spec,
            dim: ds.dim(),
        };
        let samples = ds.samples();
        let theta: Vec<f64> = (0..ds.dim()).map(|j| 0.2 * j as f64 - 0.3).collect();
        for row in samples.rows().take(20) {
            let mut grad = vec![0.0; ds.dim()];
            g.add_gradient(&theta, row, 1.0, &mut grad);
            for j in 0..ds.dim() {
                let h = 1e-6;
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (g.value(&up, row) - g.value(&dn, row)) / (2.0 * h);
                assert!((fd - grad[j]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn plug_in_identity_and_side_equivalence(
                seed in 0u64..1000,
                w in proptest::collection::vec(-2.0f64..2.0, 7),
                eps in 0.001f64..0.3,
                kind in prop_oneof![
                    Just(RateKind::DemographicParity),
                    Just(RateKind::EqualOpportunity),
                    Just(RateKind::FprParity),
                    Just(RateKind::TprParity),
                ],
            ) {
                let ds = synthesize_dataset(300, seed, &SyntheticParams::default()).unwrap();
                let theta = &w[..ds.dim()];
                let sides = RateConstraintSpec::both_sides(kind, eps, Surrogate::Hinge, &ds).unwrap();
                let [r0, r1] = group_rates(theta, &ds, kind).unwrap();
                let mut satisfied = true;
                for spec in sides.iter() {
                    let v = rate_constraint_samples(spec, theta, &ds);
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    let direct = spec.direction * (r1 - r0) - eps;
                    prop_assert!((mean - direct).abs() < 1e-12);
                    satisfied &= mean <= 0.0;
                }
                let gap = population_fairness_gap(theta, &ds, kind).unwrap();
                if (gap - eps).abs() > 1e-9 {
                    prop_assert_eq!(satisfied, gap <= eps);
                }
            }
        }
    }
}
