//! The chi-square divergence generator `φ(t) = (t - 1)²` and its conjugate.
//!
//! The conjugate is taken over `t ≥ 0` (likelihood ratios are nonnegative),
//! which gives the two-branch form
//!
//! ```text
//! φ*(s) = s + s²/4   if s ≥ -2
//!       = -1         if s < -2
//! ```
//!
//! The unrestricted quadratic `s + s²/4` agrees with it on `s ≥ -2` but is
//! not monotone, which lets early solver iterates put negative mass on
//! samples.

use crate::error::{Error, Result};

/// Stateless descriptor of the chi-square divergence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChiSquareDivergence;

impl ChiSquareDivergence {
    pub fn phi(&self, t: f64) -> f64 {
        phi(t)
    }

    pub fn conjugate(&self, s: f64) -> f64 {
        phi_conjugate(s)
    }
}

/// `(t - 1)²` on `t ≥ 0`, `+∞` otherwise.
pub fn phi(t: f64) -> f64 {
    if t >= 0.0 {
        (t - 1.0) * (t - 1.0)
    } else {
        f64::INFINITY
    }
}

/// `sup_{t ≥ 0} { s t - φ(t) }`.
pub fn phi_conjugate(s: f64) -> f64 {
    if s >= -2.0 {
        s + 0.25 * s * s
    } else {
        -1.0
    }
}

/// Derivative of [`phi_conjugate`]; the maximizing likelihood ratio
/// `t*(s) = max(0, 1 + s/2)`. The subgradient `0` is used at the kink.
pub fn phi_conjugate_derivative(s: f64) -> f64 {
    if s > -2.0 {
        1.0 + 0.5 * s
    } else {
        0.0
    }
}

/// Perspective `μ φ*(s / μ)` written without the division, so it stays
/// finite as `μ → 0`. `μ = +∞` is the ρ = 0 limit and returns `s`.
pub fn perspective(s: f64, mu: f64) -> f64 {
    if mu.is_infinite() {
        return s;
    }
    if s >= -2.0 * mu {
        s + s * s / (4.0 * mu)
    } else {
        -mu
    }
}

/// `D_φ(P ‖ P̂ₙ) = (1/n) Σ (n pᵢ - 1)²` for a probability vector `p`
/// against the uniform distribution on `uniform_n` atoms.
pub fn chi_square_between(p: &[f64], uniform_n: usize) -> Result<f64> {
    if p.len() != uniform_n || uniform_n == 0 {
        return Err(Error::SimplexViolation(format!(
            "{} weights against {} atoms",
            p.len(),
            uniform_n
        )));
    }
    if let Some(w) = p.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::SimplexViolation(format!("negative weight {w}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::SimplexViolation(format!("weights sum to {total}")));
    }
    let n = uniform_n as f64;
    Ok(p.iter().map(|w| (n * w - 1.0).powi(2)).sum::<f64>() / n)
}
