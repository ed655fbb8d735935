//! Projected gradient descent on a box with Barzilai–Borwein steps and
//! Armijo backtracking along the projection arc.

use crate::program::ParamBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub initial_step: f64,
    /// Backtracking gives up once a trial move is below
    /// `x_tol · (1 + ‖x‖∞)` in every coordinate.
    pub x_tol: f64,
}

impl Default for PgdOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            initial_step: 1.0,
            x_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgdResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Norm of the projected-gradient mapping `x - P(x - g)` at `x`.
    pub mapping_norm: f64,
    /// True when the mapping norm reached `tol`; false when the search
    /// stopped because no further decrease was found or iterations ran out.
    pub converged: bool,
    /// Last accepted step length, reusable as the next warm start.
    pub last_step: f64,
}

fn mapping_norm(bounds: &ParamBox, x: &[f64], g: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|((xi, gi), (lo, hi))| {
            let p = (xi - gi).clamp(*lo, *hi);
            (xi - p) * (xi - p)
        })
        .sum::<f64>()
        .sqrt()
}

/// Minimizes `f` over `bounds` from `x0`. `f` returns the value and writes
/// a (sub)gradient into its second argument.
pub fn minimize_box<F>(f: F, bounds: &ParamBox, x0: &[f64], opts: PgdOptions) -> PgdResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut f = f;
    let d = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; d];
    let mut value = f(&x, &mut g);
    let mut step = opts.initial_step.max(1e-12);
    let mut cand = vec![0.0; d];
    let mut cand_g = vec![0.0; d];
    let mut iterations = 0;
    let mut mnorm = mapping_norm(bounds, &x, &g);
    let mut scale = 1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max);

    while iterations < opts.max_iter {
        if mnorm <= opts.tol {
            return PgdResult {
                x,
                value,
                iterations,
                mapping_norm: mnorm,
                converged: true,
                last_step: step,
            };
        }
        iterations += 1;
        let mut t = step;
        let mut accepted = false;
        let mut cand_value = value;
        for _ in 0..60 {
            for i in 0..d {
                cand[i] = x[i] - t * g[i];
            }
            bounds.project(&mut cand);
            let largest = (0..d).map(|i| (cand[i] - x[i]).abs()).fold(0.0, f64::max);
            if largest <= opts.x_tol * scale {
                break;
            }
            let decrease: f64 = (0..d).map(|i| g[i] * (x[i] - cand[i])).sum();
            if decrease <= 0.0 {
                break;
            }
            cand_g.iter_mut().for_each(|v| *v = 0.0);
            cand_value = f(&cand, &mut cand_g);
            if cand_value <= value - 1e-4 * decrease {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        let mut sy = 0.0;
        let mut ss = 0.0;
        for i in 0..d {
            let s = cand[i] - x[i];
            sy += s * (cand_g[i] - g[i]);
            ss += s * s;
        }
        std::mem::swap(&mut x, &mut cand);
        std::mem::swap(&mut g, &mut cand_g);
        value = cand_value;
        mnorm = mapping_norm(bounds, &x, &g);
        scale = 1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { (t * 2.0).min(1e12) };

    }
    mnorm = mapping_norm(bounds, &x, &g);
    PgdResult {
        converged: mnorm <= opts.tol,
        x,
        value,
        iterations,
        mapping_norm: mnorm,
        last_step: step,
    }
}
