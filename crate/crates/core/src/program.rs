//! Problem description shared by the evaluators and solvers: per-sample
//! functions, constraint specifications, the parameter box and the
//! program that bundles them with a sample set.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An n×d matrix of observations stored row-major; the empirical measure.
///
/// Label or group columns, when present, are ordinary columns; the
/// per-sample functions know which column is which.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
}

impl fmt::Debug for SampleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SampleSet")
            .field("n", &self.len())
            .field("dim", &self.dim)
            .finish()
    }
}

impl SampleSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Dimension(format!(
                "{} values cannot be split into rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(dim * rows.len());
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Dimension(format!(
                    "ragged rows: {} vs {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Rows at `indices`, in order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            data,
        }
    }
}

/// A function `h(θ; Z)` evaluated one sample row at a time.
pub trait PerSample: Send + Sync {
    fn value(&self, theta: &[f64], row: &[f64]) -> f64;

    /// Adds `scale · ∇_θ h(θ; row)` into `grad`.
    fn add_gradient(&self, theta: &[f64], row: &[f64], scale: f64, grad: &mut [f64]);
}

/// Fills `out[i] = h(θ; Zᵢ)`.
pub fn sample_values(h: &dyn PerSample, theta: &[f64], samples: &SampleSet, out: &mut Vec<f64>) {
    out.clear();
    out.extend(samples.rows().map(|r| h.value(theta, r)));
}

/// `Σ wᵢ ∇h(θ; Zᵢ)`, skipping zero weights.
pub fn weighted_gradient(
    h: &dyn PerSample,
    theta: &[f64],
    samples: &SampleSet,
    weights: &[f64],
    grad: &mut [f64],
) {
    for (r, &w) in samples.rows().zip(weights) {
        if w != 0.0 {
            h.add_gradient(theta, r, w, grad);
        }
    }
}

/// Per-coordinate bounds `[lo, hi]` on θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Dimension(format!(
                "box bounds of lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(Error::InvalidProgram(format!(
                "empty box in coordinate {i}: [{}, {}]",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, theta: &mut [f64]) {
        for ((t, lo), hi) in theta.iter_mut().zip(&self.lower).zip(&self.upper) {
            *t = t.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((t, lo), hi)| lo <= t && t <= hi)
    }

    /// Midpoint, or 0 clamped into the box when the box is wide.
    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| {
                if lo.is_finite() && hi.is_finite() {
                    0.5 * (lo + hi)
                } else {
                    0.0f64.clamp(*lo, *hi)
                }
            })
            .collect()
    }
}

/// One expected-value constraint `E[g(θ; Z)] ≤ 0` with its robustness
/// radius. Any slack is already folded into `g`.
#[derive(Clone)]
pub struct ConstraintSpec {
    pub name: String,
    pub g: Arc<dyn PerSample>,
    /// Smooth stand-in used by the proxy dual function.
    pub surrogate: Option<Arc<dyn PerSample>>,
    pub differentiable: bool,
    pub radius: f64,
}

impl fmt::Debug for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintSpec")
            .field("name", &self.name)
            .field("differentiable", &self.differentiable)
            .field("has_surrogate", &self.surrogate.is_some())
            .field("radius", &self.radius)
            .finish()
    }
}

impl ConstraintSpec {
    pub fn smooth(name: impl Into<String>, g: Arc<dyn PerSample>, radius: f64) -> Self {
        Self {
            name: name.into(),
            g,
            surrogate: None,
            differentiable: true,
            radius,
        }
    }

    pub fn with_surrogate(
        name: impl Into<String>,
        g: Arc<dyn PerSample>,
        surrogate: Arc<dyn PerSample>,
        radius: f64,
    ) -> Self {
        Self {
            name: name.into(),
            g,
            surrogate: Some(surrogate),
            differentiable: false,
            radius,
        }
    }
}

/// Objective, constraints, parameter box and samples.
#[derive(Clone)]
pub struct RobustProgram {
    pub objective: Arc<dyn PerSample>,
    pub constraints: Vec<ConstraintSpec>,
    pub bounds: ParamBox,
    pub samples: Arc<SampleSet>,
    /// Starting θ; defaults to the box center.
    pub initial_theta: Option<Vec<f64>>,
}

impl fmt::Debug for RobustProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RobustProgram")
            .field("constraints", &self.constraints)
            .field("bounds", &self.bounds)
            .field("samples", &self.samples)
            .finish()
    }
}

impl RobustProgram {
    pub fn new(
        objective: Arc<dyn PerSample>,
        constraints: Vec<ConstraintSpec>,
        bounds: ParamBox,
        samples: SampleSet,
    ) -> Result<Self> {
        let p = Self {
            objective,
            constraints,
            bounds,
            samples: Arc::new(samples),
            initial_theta: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.constraints.is_empty() {
            return Err(Error::InvalidProgram("at least one constraint is required".into()));
        }
        if self.samples.is_empty() {
            return Err(Error::InvalidProgram("empty sample set".into()));
        }
        for c in &self.constraints {
            if !(c.radius >= 0.0 && c.radius.is_finite()) {
                return Err(Error::InvalidProgram(format!(
                    "constraint {}: radius {} must be finite and nonnegative",
                    c.name, c.radius
                )));
            }
            if !c.differentiable && c.surrogate.is_none() {
                return Err(Error::InvalidProgram(format!(
                    "constraint {} is non-differentiable but has no surrogate",
                    c.name
                )));
            }
        }
        if let Some(t) = &self.initial_theta {
            if t.len() != self.bounds.dim() {
                return Err(Error::Dimension(format!(
                    "initial theta has {} coordinates, box has {}",
                    t.len(),
                    self.bounds.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn radii(&self) -> Vec<f64> {
        self.constraints.iter().map(|c| c.radius).collect()
    }

    /// Same program with radii replaced.
    pub fn with_radii(&self, radii: &[f64]) -> Result<Self> {
        if radii.len() != self.constraints.len() {
            return Err(Error::Dimension(format!(
                "{} radii for {} constraints",
                radii.len(),
                self.constraints.len()
            )));
        }
        let mut p = self.clone();
        for (c, &r) in p.constraints.iter_mut().zip(radii) {
            c.radius = r;
        }
        p.validate()?;
        Ok(p)
    }

    /// Same program on a different sample set.
    pub fn with_samples(&self, samples: SampleSet) -> Self {
        let mut p = self.clone();
        p.samples = Arc::new(samples);
        p
    }

    pub fn with_initial_theta(mut self, theta: Vec<f64>) -> Result<Self> {
        self.initial_theta = Some(theta);
        self.validate()?;
        Ok(self)
    }

    pub fn starting_theta(&self) -> Vec<f64> {
        let mut t = self
            .initial_theta
            .clone()
            .unwrap_or_else(|| self.bounds.center());
        self.bounds.project(&mut t);
        t
    }

    pub fn has_non_differentiable(&self) -> bool {
        self.constraints.iter().any(|c| !c.differentiable)
    }

    /// Per-sample values of constraint `k` at θ.
    pub fn constraint_values(&self, k: usize, theta: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.samples.len());
        sample_values(self.constraints[k].g.as_ref(), theta, &self.samples, &mut out);
        out
    }

    /// Sample mean of the objective at θ.
    pub fn objective_mean(&self, theta: &[f64]) -> f64 {
        let n = self.samples.len() as f64;
        self.samples
            .rows()
            .map(|r| self.objective.value(theta, r))
            .sum::<f64>()
            / n
    }
}

/// A per-sample function built from closures; handy for toys and tests.
pub struct FnSample<V, G>
where
    V: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync,
{
    value: V,
    gradient: G,
}

impl<V, G> FnSample<V, G>
where
    V: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync,
{
    pub fn new(value: V, gradient: G) -> Self {
        Self { value, gradient }
    }
}

impl<V, G> PerSample for FnSample<V, G>
where
    V: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync,
{
    fn value(&self, theta: &[f64], row: &[f64]) -> f64 {
        (self.value)(theta, row)
    }

    fn add_gradient(&self, theta: &[f64], row: &[f64], scale: f64, grad: &mut [f64]) {
        (self.gradient)(theta, row, scale, grad)
    }
}

/// `h(θ; z) = θᵀz + offset`, reading `z` from the first `θ.len()` columns.
#[derive(Debug, Clone, Copy, Default)]
pub struct Linear {
    pub offset: f64,
}

impl PerSample for Linear {
    fn value(&self, theta: &[f64], row: &[f64]) -> f64 {
        theta.iter().zip(row).map(|(t, z)| t * z).sum::<f64>() + self.offset
    }

    fn add_gradient(&self, _theta: &[f64], row: &[f64], scale: f64, grad: &mut [f64]) {
        for (g, z) in grad.iter_mut().zip(row) {
            *g += scale * z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_set_rows_and_select() {
        let s = SampleSet::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.row(1), &[3.0, 4.0]);
        assert_eq!(s.column(1), vec![2.0, 4.0, 6.0]);
        let sub = s.select(&[2, 2, 0]);
        assert_eq!(sub.column(0), vec![5.0, 5.0, 1.0]);
        assert!(SampleSet::new(2, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn box_projection_and_errors() {
        let b = ParamBox::uniform(2, 0.0, 1.0).unwrap();
        let mut t = [1.5, -0.2];
        b.project(&mut t);
        assert_eq!(t, [1.0, 0.0]);
        assert!(ParamBox::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn program_requires_surrogate_for_nonsmooth_constraints() {
        let samples = SampleSet::from_rows(&[[1.0]]).unwrap();
        let mut c = ConstraintSpec::smooth("c", Arc::new(Linear::default()), 0.0);
        c.differentiable = false;
        let r = RobustProgram::new(
            Arc::new(Linear::default()),
            vec![c],
            ParamBox::uniform(1, -1.0, 1.0).unwrap(),
            samples,
        );
        assert!(matches!(r, Err(Error::InvalidProgram(_))));
    }
}
