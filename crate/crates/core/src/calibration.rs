//! Radius calibration.
//!
//! A single constraint calibrated at level `α` uses `ρ = z²_{1-α}`, so that
//! `√ρ` is the standard normal `1-α` quantile. For several constraints the
//! joint search picks a common threshold `t` with
//! `P{U_k ≤ t for all k} = level`, `U ~ N(0, R̂)`, and sets every `ρ_k = t²`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probstats::{
    correlation_matrix, for_each_gaussian_draw, normal_quantile, ConfidenceLevel,
    CorrelationEstimate,
};
use crate::program::RobustProgram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusProvenance {
    PerConstraint,
    Joint,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusVector {
    pub rho: Vec<f64>,
    pub provenance: RadiusProvenance,
    /// Common threshold of the joint search.
    pub threshold: Option<f64>,
}

impl RadiusVector {
    pub fn manual(rho: Vec<f64>) -> Result<Self> {
        if let Some(r) = rho.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return Err(Error::domain("radius", *r, "finite rho >= 0"));
        }
        Ok(Self {
            rho,
            provenance: RadiusProvenance::Manual,
            threshold: None,
        })
    }

    pub fn per_constraint(alpha: ConfidenceLevel, k: usize) -> Result<Self> {
        let rho = radius_for_level(alpha)?;
        Ok(Self {
            rho: vec![rho; k],
            provenance: RadiusProvenance::PerConstraint,
            threshold: Some(rho.sqrt()),
        })
    }
}

/// `ρ = z²_{1-α}`. Levels with `α ≥ 0.5` are rejected: their quantile is
/// not positive and SAA already reaches one half.
pub fn radius_for_level(alpha: ConfidenceLevel) -> Result<f64> {
    let a = alpha.alpha();
    if a >= 0.5 {
        return Err(Error::domain("radius_for_level", a, "alpha < 0.5"));
    }
    let z = normal_quantile(1.0 - a)?;
    Ok(z * z)
}

/// Common-threshold search for a joint coverage `joint_level`.
///
/// With common random numbers the coverage `t ↦ P̂{max_k U_k ≤ t}` is a step
/// function; bisection returns the smallest `t` reaching the level, i.e. the
/// empirical `joint_level` quantile of `max_k U_k`.
pub fn joint_radius_search(
    correlation: &CorrelationEstimate,
    joint_level: f64,
    mc_draws: usize,
    seed: u64,
) -> Result<RadiusVector> {
    if !(joint_level > 0.5 && joint_level < 1.0) {
        return Err(Error::domain("joint level", joint_level, "0.5 < level < 1"));
    }
    if mc_draws < 10_000 {
        return Err(Error::domain("joint search draws", mc_draws as f64, "at least 1e4 draws"));
    }
    let mut maxima = Vec::with_capacity(mc_draws);
    for_each_gaussian_draw(correlation, mc_draws, seed, |u| {
        maxima.push(u.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    })?;
    maxima.sort_by(f64::total_cmp);
    let coverage = |t: f64| maxima.partition_point(|m| *m <= t) as f64 / mc_draws as f64;

    let (mut lo, mut hi) = (0.0, 10.0);
    if coverage(lo) >= joint_level || coverage(hi) < joint_level {
        return Err(Error::BracketFailure {
            lo,
            hi,
            target: joint_level,
        });
    }
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if coverage(mid) >= joint_level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let t = hi;
    Ok(RadiusVector {
        rho: vec![t * t; correlation.dim()],
        provenance: RadiusProvenance::Joint,
        threshold: Some(t),
    })
}

/// Correlation of the per-sample constraint values `g_k(θ̂; Zᵢ)`.
pub fn estimate_constraint_correlation(
    program: &RobustProgram,
    theta: &[f64],
) -> Result<CorrelationEstimate> {
    let n = program.samples.len();
    let k = program.len();
    let mut m = DMatrix::<f64>::zeros(n, k);
    for j in 0..k {
        for (i, v) in program.constraint_values(j, theta).into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    correlation_matrix(&m)
}

/// Joint radii for the constraints `indices` of `program` at θ̂; the
/// remaining constraints get radius zero.
pub fn joint_radii_on_subset(
    program: &RobustProgram,
    theta: &[f64],
    indices: &[usize],
    joint_level: f64,
    mc_draws: usize,
    seed: u64,
) -> Result<RadiusVector> {
    let mut rho = vec![0.0; program.len()];
    if indices.is_empty() {
        return Ok(RadiusVector {
            rho,
            provenance: RadiusProvenance::Joint,
            threshold: None,
        });
    }
    let full = estimate_constraint_correlation(&subset_program(program, indices), theta)?;
    let rv = joint_radius_search(&full, joint_level, mc_draws, seed)?;
    for (&i, r) in indices.iter().zip(&rv.rho) {
        rho[i] = *r;
    }
    Ok(RadiusVector { rho, ..rv })
}

fn subset_program(program: &RobustProgram, indices: &[usize]) -> RobustProgram {
    let mut p = program.clone();
    p.constraints = indices.iter().map(|&i| program.constraints[i].clone()).collect();
    p
}
