//! Worst-case expectation over the chi-square ball
//! `{P : D_φ(P ‖ P̂ₙ) ≤ ρ/n}`, computed three independent ways:
//!
//! * [`robust_sup_dual`] minimizes the dual
//!   `inf_{μ ≥ 0, ν} (1/n) Σ μ φ*((gᵢ - ν)/μ) + μρ/n + ν` numerically;
//! * [`robust_sup_primal_oracle`] maximizes `Σ pᵢ gᵢ` over the simplex
//!   subject to `Σ (n pᵢ - 1)² ≤ ρ` by bisection on the multiplier of the
//!   quadratic constraint;
//! * [`variance_expansion`] is the closed form `ḡ + sqrt(ρ σ̂²/n)`, which is
//!   exact whenever no worst-case weight hits zero.
//!
//! The radius convention: `ρ` is the calibrated radius (e.g. `z²_α`), the
//! divergence budget is `ρ/n`.

use serde::{Deserialize, Serialize};

use crate::divergence::perspective;
use crate::error::{Error, Result};
use crate::probstats::empirical_moments;
use crate::program::{sample_values, weighted_gradient, PerSample, SampleSet};

/// Smallest `μ` the dual minimization will use.
pub const MU_FLOOR: f64 = 1e-12;

const DUAL_MAX_ITER: usize = 500;

/// Constraint samples `gᵢ = g(θ; Zᵢ)` at a fixed θ together with a radius.
#[derive(Debug, Clone, Copy)]
pub struct ConstraintValues<'a> {
    values: &'a [f64],
    rho: f64,
}

impl<'a> ConstraintValues<'a> {
    pub fn new(values: &'a [f64], rho: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("no constraint samples".into()));
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::domain("radius", rho, "finite rho >= 0"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain("constraint value", *v, "finite values"));
        }
        Ok(Self { values, rho })
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The dual variables `(μ, ν)`. `μ = +∞` encodes the `ρ = 0` limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerDualVars {
    pub mu: f64,
    pub nu: f64,
}

/// A worst-case value with the dual point that attains it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustValue {
    pub value: f64,
    pub inner: InnerDualVars,
}

/// Dual objective `(1/n) Σ μ φ*((gᵢ - ν)/μ) + μρ/n + ν` at a given point.
///
/// Any `(μ, ν)` gives an upper bound on the worst-case expectation; the
/// proxy dual ascent update relies on this.
pub fn dual_objective(values: &[f64], rho: f64, inner: InnerDualVars) -> f64 {
    let n = values.len() as f64;
    let InnerDualVars { mu, nu } = inner;
    let penalty = if mu.is_infinite() {
        if rho > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        mu * rho / n
    };
    values.iter().map(|g| perspective(g - nu, mu)).sum::<f64>() / n + penalty + nu
}

/// Worst-case weights `pᵢ = φ*'((gᵢ - ν)/μ) / n` written into `out`.
pub fn worst_case_weights_into(values: &[f64], inner: InnerDualVars, out: &mut Vec<f64>) {
    let n = values.len() as f64;
    out.clear();
    if inner.mu.is_infinite() {
        out.resize(values.len(), 1.0 / n);
        return;
    }
    let scale = 1.0 / (2.0 * inner.mu);
    out.extend(
        values
            .iter()
            .map(|g| (1.0 + (g - inner.nu) * scale).max(0.0) / n),
    );
}

pub fn worst_case_weights(values: &[f64], inner: InnerDualVars) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    worst_case_weights_into(values, inner, &mut out);
    out
}

/// `ḡ + sqrt(ρ σ̂² / n)` with the population variance.
pub fn variance_expansion(cv: ConstraintValues<'_>) -> Result<f64> {
    if cv.len() < 2 {
        return Err(Error::Dimension(
            "variance expansion needs at least two samples".into(),
        ));
    }
    let (mean, var) = empirical_moments(cv.values);
    Ok(mean + (cv.rho * var / cv.len() as f64).sqrt())
}

/// Lower bound from the primal side: normalized weights pulled toward the
/// uniform distribution until the divergence budget holds.
fn primal_lower_bound(values: &[f64], rho: f64, mu: f64, nu: f64) -> f64 {
    let n = values.len() as f64;
    let scale = 1.0 / (2.0 * mu);
    let total: f64 = values
        .iter()
        .map(|g| (1.0 + (g - nu) * scale).max(0.0))
        .sum();
    if !(total > 0.0) || !total.is_finite() {
        return f64::NEG_INFINITY;
    }
    let mut div = 0.0;
    let mut weighted = 0.0;
    let mut mean = 0.0;
    for &g in values {
        let l = (1.0 + (g - nu) * scale).max(0.0) * n / total;
        div += (l - 1.0) * (l - 1.0);
        weighted += l * g;
        mean += g;
    }
    weighted /= n;
    mean /= n;
    let tau = if div > rho { (rho / div).sqrt() } else { 1.0 };
    mean + tau * (weighted - mean)
}

/// Numeric minimization of the dual over `(μ, ν)`.
///
/// Starts from the closed-form optimum of the all-weights-positive regime,
/// `μ₀ = ½ sqrt(n σ̂²/ρ)`, `ν₀ = ḡ`; when no weight is negative there, that
/// point is already optimal and is returned as is. Otherwise `ν` is
/// minimized out exactly and the remaining convex function of `μ` is
/// minimized by bisection on the sign of its derivative in `log μ`, until
/// the primal/dual gap drops below `tol`.
pub fn robust_sup_dual(cv: ConstraintValues<'_>, tol: f64) -> Result<RobustValue> {
    robust_sup_dual_from(cv, tol, None)
}

/// [`robust_sup_dual`] with an optional warm start used when the
/// closed-form start is not already optimal.
pub fn robust_sup_dual_from(
    cv: ConstraintValues<'_>,
    tol: f64,
    warm: Option<InnerDualVars>,
) -> Result<RobustValue> {
    if !(tol > 0.0) {
        return Err(Error::domain("robust_sup_dual tolerance", tol, "tol > 0"));
    }
    let values = cv.values;
    let rho = cv.rho;
    let n = values.len() as f64;
    let (mean, var) = empirical_moments(values);
    if rho == 0.0 {
        return Ok(RobustValue {
            value: mean,
            inner: InnerDualVars {
                mu: f64::INFINITY,
                nu: mean,
            },
        });
    }
    let scale = 1.0 + mean.abs() + var.sqrt();
    if var <= (f64::EPSILON * scale).powi(2) {
        return Ok(RobustValue {
            value: mean,
            inner: InnerDualVars {
                mu: MU_FLOOR,
                nu: mean,
            },
        });
    }

    let mu0 = (0.5 * (n * var / rho).sqrt()).max(MU_FLOOR);
    let min_g = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_g - mean >= -2.0 * mu0 {
        return Ok(RobustValue {
            value: mean + (rho * var / n).sqrt(),
            inner: InnerDualVars { mu: mu0, nu: mean },
        });
    }

    let tol = tol.max(1e-13 * scale);
    let reduced = Reduced::new(values, rho);

    // h'(μ) is nondecreasing; bracket its root in log μ.
    let start = warm
        .map(|w| w.mu)
        .filter(|m| m.is_finite() && *m > MU_FLOOR)
        .unwrap_or(mu0);
    let (mut lo, mut hi) = (start, start);
    while reduced.slope(lo) > 0.0 {
        lo *= 0.25;
        if lo < MU_FLOOR {
            // The budget admits the point mass on the maxima.
            let nu = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let inner = InnerDualVars { mu: MU_FLOOR, nu };
            return Ok(RobustValue {
                value: dual_objective(values, rho, inner),
                inner,
            });
        }
    }
    while reduced.slope(hi) < 0.0 {
        hi *= 4.0;
        if !hi.is_finite() {
            return Err(Error::BracketFailure { lo, hi, target: 0.0 });
        }
    }

    let mut best: Option<(f64, InnerDualVars)> = None;
    let mut gap = f64::INFINITY;
    for _ in 0..DUAL_MAX_ITER {
        let mu = (lo * hi).sqrt();
        let nu = reduced.nu(mu);
        let value = dual_objective(values, rho, InnerDualVars { mu, nu });
        gap = value - primal_lower_bound(values, rho, mu, nu);
        if best.map_or(true, |(v, _)| value < v) {
            best = Some((value, InnerDualVars { mu, nu }));
        }
        if gap <= tol || hi / lo - 1.0 <= 1e-15 {
            break;
        }
        if reduced.slope(mu) > 0.0 {
            hi = mu;
        } else {
            lo = mu;
        }
    }
    let (value, inner) = best.expect("at least one bisection step");
    if gap <= 1e3 * tol {
        return Ok(RobustValue { value, inner });
    }
    Err(Error::InnerNotConverged {
        iterations: DUAL_MAX_ITER,
        last: inner,
        grad_norm: gap,
    })
}

/// The dual with `ν` minimized out: for fixed `μ` the optimal `ν = c + 2μ`
/// where `Σ (gᵢ - c)₊ = 2nμ`, found from the sorted values.
struct Reduced<'a> {
    values: &'a [f64],
    sorted: Vec<f64>,
    prefix: Vec<f64>,
    rho: f64,
}

impl<'a> Reduced<'a> {
    fn new(values: &'a [f64], rho: f64) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut prefix = Vec::with_capacity(sorted.len() + 1);
        prefix.push(0.0);
        for v in &sorted {
            prefix.push(prefix.last().unwrap() + v);
        }
        Self {
            values,
            sorted,
            prefix,
            rho,
        }
    }

    fn threshold(&self, mu: f64) -> f64 {
        let n = self.sorted.len();
        let target = 2.0 * n as f64 * mu;
        for m in 1..=n {
            let c = (self.prefix[m] - target) / m as f64;
            let next = if m < n { self.sorted[m] } else { f64::NEG_INFINITY };
            if c >= next {
                return c;
            }
        }
        (self.prefix[n] - target) / n as f64
    }

    fn nu(&self, mu: f64) -> f64 {
        self.threshold(mu) + 2.0 * mu
    }

    /// `dh/dμ = ρ/n - (1/n) Σ (Lᵢ - 1)²` at the optimal `ν`.
    fn slope(&self, mu: f64) -> f64 {
        let n = self.values.len() as f64;
        let c = self.threshold(mu);
        let q: f64 = self
            .values
            .iter()
            .map(|g| {
                let l = (g - c).max(0.0) / (2.0 * mu);
                (l - 1.0) * (l - 1.0)
            })
            .sum();
        (self.rho - q) / n
    }
}

/// Exact maximizer of `Σ pᵢ gᵢ` over the simplex with `Σ (n pᵢ - 1)² ≤ ρ`.
///
/// The KKT conditions give `n pᵢ = κ (gᵢ - c)₊` for the multiplier `κ ≥ 0`
/// of the quadratic constraint; for each `κ` the threshold `c` is found
/// exactly by scanning the sorted values, and `κ` is found by bisection on
/// the (monotone) divergence. Ties at the maximum in the point-mass regime
/// put all mass on the lowest index.
pub fn robust_sup_primal_oracle(cv: ConstraintValues<'_>) -> Result<(f64, Vec<f64>)> {
    let values = cv.values;
    let rho = cv.rho;
    let n = values.len();
    let nf = n as f64;
    let (mean, _) = empirical_moments(values);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if rho == 0.0 || max == min {
        return Ok((mean, vec![1.0 / nf; n]));
    }

    let ties: Vec<usize> = (0..n).filter(|&i| values[i] == max).collect();
    let r = ties.len() as f64;
    let limit = nf * (nf - r) / r;
    if rho >= nf * (nf - 1.0) {
        let mut w = vec![0.0; n];
        w[ties[0]] = 1.0;
        return Ok((max, w));
    }
    if rho >= limit {
        let mut w = vec![0.0; n];
        for &i in &ties {
            w[i] = 1.0 / r;
        }
        return Ok((max, w));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    // Threshold c(κ) with Σ κ (gᵢ - c)₊ = n.
    let threshold = |kappa: f64| -> f64 {
        let target = nf / kappa;
        let mut prefix = 0.0;
        for m in 1..=n {
            prefix += sorted[m - 1];
            let c = (prefix - target) / m as f64;
            let next = if m < n { sorted[m] } else { f64::NEG_INFINITY };
            if c >= next && c < sorted[m - 1] {
                return c;
            }
        }
        (prefix - target) / nf
    };
    let divergence = |kappa: f64| -> f64 {
        let c = threshold(kappa);
        sorted
            .iter()
            .map(|g| {
                let l = kappa * (g - c).max(0.0);
                (l - 1.0) * (l - 1.0)
            })
            .sum::<f64>()
    };

    let mut lo = 0.0;
    let mut hi = 1.0 / (max - min);
    while divergence(hi) < rho {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::BracketFailure { lo, hi, target: rho });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if divergence(mid) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    let kappa = 0.5 * (lo + hi);
    let c = threshold(kappa);
    let mut weights: Vec<f64> = values.iter().map(|g| kappa * (g - c).max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    let value = weights.iter().zip(values).map(|(w, g)| w * g).sum();
    Ok((value, weights))
}

/// Worst-case value of `g(θ; ·)` over `samples` and its gradient in θ,
/// `Σ pᵢ ∇gᵢ` with the worst-case weights at the inner minimizer.
pub fn robust_sup_gradient(
    g: &dyn PerSample,
    samples: &SampleSet,
    theta: &[f64],
    rho: f64,
    tol: f64,
) -> Result<(RobustValue, Vec<f64>)> {
    let mut values = Vec::with_capacity(samples.len());
    sample_values(g, theta, samples, &mut values);
    let rv = robust_sup_dual(ConstraintValues::new(&values, rho)?, tol)?;
    let weights = worst_case_weights(&values, rv.inner);
    let mut grad = vec![0.0; theta.len()];
    weighted_gradient(g, theta, samples, &weights, &mut grad);
    Ok((rv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::chi_square_between;
    use crate::program::{FnSample, Linear};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cv(values: &[f64], rho: f64) -> ConstraintValues<'_> {
        ConstraintValues::new(values, rho).unwrap()
    }

    #[test]
    fn constant_values_are_their_own_worst_case() {
        let v = [2.5; 7];
        for rho in [0.0, 0.3, 50.0] {
            let r = robust_sup_dual(cv(&v, rho), 1e-10).unwrap();
            assert!((r.value - 2.5).abs() < 1e-12);
            assert!((robust_sup_primal_oracle(cv(&v, rho)).unwrap().0 - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_radius_gives_the_mean() {
        let v = [0.0, 1.0, 5.0, -2.0];
        let r = robust_sup_dual(cv(&v, 0.0), 1e-10).unwrap();
        assert_eq!(r.value, 1.0);
        let (value, w) = robust_sup_primal_oracle(cv(&v, 0.0)).unwrap();
        assert_eq!(value, 1.0);
        assert!(w.iter().all(|&x| x == 0.25));
    }

    #[test]
    fn two_point_instance() {
        let v = [0.0, 1.0];
        let r = robust_sup_dual(cv(&v, 0.5), 1e-12).unwrap();
        assert!((r.value - 0.75).abs() < 1e-10);
        let (value, w) = robust_sup_primal_oracle(cv(&v, 0.5)).unwrap();
        assert!((value - 0.75).abs() < 1e-10);
        assert!((w[0] - 0.25).abs() < 1e-9 && (w[1] - 0.75).abs() < 1e-9);
        assert!((variance_expansion(cv(&v, 0.5)).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn large_radius_recovers_the_maximum() {
        let v = [0.3, -1.0, 2.0, 2.0, 0.5];
        let n = v.len() as f64;
        let rho = n * (n - 1.0);
        let (value, w) = robust_sup_primal_oracle(cv(&v, rho)).unwrap();
        assert_eq!(value, 2.0);
        assert_eq!(w, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let r = robust_sup_dual(cv(&v, rho), 1e-10).unwrap();
        assert!((r.value - 2.0).abs() < 1e-8, "{}", r.value);
    }

    #[test]
    fn oracle_weights_respect_the_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(3..30);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let rho = rng.random_range(0.0..(2 * n) as f64);
            let (_, w) = robust_sup_primal_oracle(cv(&v, rho)).unwrap();
            let d = chi_square_between(&w, n).unwrap();
            assert!(d <= rho / n as f64 + 1e-9, "divergence {d} > {}", rho / n as f64);
        }
    }

    #[test]
    fn variance_regime_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..1.0)).collect();
        let r = robust_sup_dual(cv(&v, 2.7), 1e-12).unwrap();
        let ve = variance_expansion(cv(&v, 2.7)).unwrap();
        assert!((r.value - ve).abs() < 1e-12);
        let (oracle, w) = robust_sup_primal_oracle(cv(&v, 2.7)).unwrap();
        assert!(w.iter().all(|&x| x > 0.0));
        assert!((oracle - ve).abs() < 1e-9);
    }

    #[test]
    fn dual_objective_upper_bounds_the_value() {
        let v = [0.1, 0.9, -0.4, 2.2, 1.3];
        let best = robust_sup_dual(cv(&v, 1.5), 1e-12).unwrap();
        for mu in [0.01, 0.3, 1.0, 7.0] {
            for nu in [-1.0, 0.0, 0.7, 3.0] {
                assert!(dual_objective(&v, 1.5, InnerDualVars { mu, nu }) >= best.value - 1e-12);
            }
        }
        assert!((dual_objective(&v, 1.5, best.inner) - best.value).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_constant_and_linear_functions() {
        let samples = SampleSet::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]).unwrap();
        let constant = FnSample::new(|_: &[f64], _: &[f64]| 4.0, |_: &[f64], _: &[f64], _, _: &mut [f64]| {});
        let (_, grad) = robust_sup_gradient(&constant, &samples, &[0.2, 0.3], 1.0, 1e-10).unwrap();
        assert_eq!(grad, vec![0.0, 0.0]);

        let (_, grad) = robust_sup_gradient(&Linear::default(), &samples, &[0.2, 0.3], 0.0, 1e-10).unwrap();
        assert!((grad[0] - 1.5).abs() < 1e-12 && (grad[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        // g(θ; z) = sin(θ₀ z₀) + θ₁² z₁, smooth in θ.
        let g = FnSample::new(
            |t: &[f64], z: &[f64]| (t[0] * z[0]).sin() + t[1] * t[1] * z[1],
            |t: &[f64], z: &[f64], s: f64, out: &mut [f64]| {
                out[0] += s * z[0] * (t[0] * z[0]).cos();
                out[1] += s * 2.0 * t[1] * z[1];
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows: Vec<[f64; 2]> = (0..15)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)])
            .collect();
        let samples = SampleSet::from_rows(&rows).unwrap();
        let theta = [0.7, -0.4];
        for rho in [0.5, 3.0, 20.0] {
            let (_, grad) = robust_sup_gradient(&g, &samples, &theta, rho, 1e-13).unwrap();
            let h = 1e-5;
            for j in 0..2 {
                let mut up = theta;
                let mut dn = theta;
                up[j] += h;
                dn[j] -= h;
                let f = |t: &[f64]| robust_sup_gradient(&g, &samples, t, rho, 1e-13).unwrap().0.value;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                assert!(
                    (fd - grad[j]).abs() <= 1e-4 * (1.0 + fd.abs()),
                    "rho={rho} j={j}: fd {fd} vs {}",
                    grad[j]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn sandwich_and_monotone(
            v in proptest::collection::vec(-5.0f64..5.0, 3..25),
            rho_a in 0.0f64..40.0,
            rho_b in 0.0f64..40.0,
        ) {
            let (lo, hi) = if rho_a <= rho_b { (rho_a, rho_b) } else { (rho_b, rho_a) };
            let a = robust_sup_dual(cv(&v, lo), 1e-10).unwrap().value;
            let b = robust_sup_dual(cv(&v, hi), 1e-10).unwrap().value;
            let (mean, _) = empirical_moments(&v);
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a <= b + 1e-8);
            prop_assert!(mean <= a + 1e-9);
            prop_assert!(b <= max + 1e-8);
        }

        #[test]
        fn translation_and_scaling(
            v in proptest::collection::vec(-5.0f64..5.0, 3..25),
            rho in 0.0f64..30.0,
            shift in -10.0f64..10.0,
            scale in 0.1f64..10.0,
        ) {
            let base = robust_sup_dual(cv(&v, rho), 1e-11).unwrap().value;
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
            let s = robust_sup_dual(cv(&shifted, rho), 1e-11).unwrap().value;
            let c = robust_sup_dual(cv(&scaled, rho), 1e-11).unwrap().value;
            prop_assert!((s - (base + shift)).abs() <= 1e-8 * (1.0 + s.abs()));
            prop_assert!((c - scale * base).abs() <= 1e-8 * (1.0 + c.abs()));
        }
    }
}
