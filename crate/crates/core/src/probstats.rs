//! Gaussian kernels, empirical moments and correlation estimation.
//!
//! Variances in this crate use the population convention (divide by `n`),
//! not the unbiased `n - 1` convention. The closed form of the chi-square
//! worst-case expectation is written in terms of `(1/n) Σ (g_i - ḡ)²`, and
//! every routine that feeds it (moments, correlations, the variance
//! expansion) must agree on that normalization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking and repairing positive semidefiniteness.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Target violation probability `alpha` in `(0, 1)`.
///
/// `joint` marks a level that applies to all constraints simultaneously
/// rather than to each constraint separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceLevel {
    alpha: f64,
    joint: bool,
}

impl ConfidenceLevel {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::domain("confidence level", alpha, "0 < alpha < 1"));
        }
        Ok(Self {
            alpha,
            joint: false,
        })
    }

    pub fn joint(alpha: f64) -> Result<Self> {
        Ok(Self {
            joint: true,
            ..Self::new(alpha)?
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `1 - alpha`, the targeted satisfaction probability.
    pub fn coverage(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn is_joint(&self) -> bool {
        self.joint
    }
}

// Wichura's AS241 (PPND16) coefficients. Relative accuracy is about 1e-16
// over the whole open unit interval.
const A: [f64; 8] = [
    3.387_132_872_796_366_608_0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083_0e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061_0e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561_0e3,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_577_34,
    4.630_337_846_156_545_295_90,
    5.769_497_221_460_691_405_50,
    3.647_848_324_763_204_605_04,
    1.270_458_252_452_368_382_58,
    2.417_807_251_774_506_117_70e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_40e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87,
    1.676_384_830_183_803_849_40,
    6.897_673_349_851_000_045_50e-1,
    1.481_039_764_274_800_745_90e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946_00e-4,
    1.050_750_071_644_416_843_24e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103_777_20,
    5.463_784_911_164_114_369_90,
    1.784_826_539_917_291_335_80,
    2.965_605_718_285_048_912_30e-1,
    2.653_218_952_657_612_309_30e-2,
    1.242_660_947_388_078_438_60e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_90e-1,
    1.369_298_809_227_358_053_10e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591_00e-4,
    1.846_318_317_510_054_681_80e-5,
    1.421_511_758_316_445_888_70e-7,
    2.044_263_103_389_939_785_64e-15,
];

fn horner(coeffs: &[f64; 8], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Inverse of the standard normal CDF, computed with Wichura's AS241
/// rational approximation.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain("normal_quantile", p, "0 < p < 1"));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return Ok(q * horner(&A, r) / horner(&B, r));
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let z = if r <= 5.0 {
        let r = r - 1.6;
        horner(&C, r) / horner(&D, r)
    } else {
        let r = r - 5.0;
        horner(&E, r) / horner(&F, r)
    };
    Ok(if q < 0.0 { -z } else { z })
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Mean and population variance of `values`.
///
/// Panics on an empty slice.
pub fn empirical_moments(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "empirical_moments needs at least one value");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, variance)
}

/// An estimated K×K correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationEstimate {
    pub matrix: DMatrix<f64>,
    pub sample_count: usize,
}

impl CorrelationEstimate {
    /// Wraps a user-supplied correlation matrix after validating it.
    pub fn from_matrix(matrix: DMatrix<f64>, sample_count: usize) -> Result<Self> {
        let k = matrix.nrows();
        if k == 0 || matrix.ncols() != k {
            return Err(Error::Dimension(format!(
                "correlation matrix must be square and nonempty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        for i in 0..k {
            if (matrix[(i, i)] - 1.0).abs() > PSD_TOLERANCE {
                return Err(Error::Dimension(format!(
                    "correlation diagonal entry {i} is {}",
                    matrix[(i, i)]
                )));
            }
            for j in 0..k {
                let v = matrix[(i, j)];
                if (v - matrix[(j, i)]).abs() > PSD_TOLERANCE || v.abs() > 1.0 + PSD_TOLERANCE {
                    return Err(Error::Dimension(format!(
                        "correlation entry ({i},{j}) = {v} breaks symmetry or the [-1,1] range"
                    )));
                }
            }
        }
        let est = Self {
            matrix,
            sample_count,
        };
        est.gaussian_factor()?;
        Ok(est)
    }

    pub fn identity(k: usize) -> Self {
        Self {
            matrix: DMatrix::identity(k, k),
            sample_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Restriction to the rows/columns in `indices`.
    pub fn submatrix(&self, indices: &[usize]) -> Self {
        let m = DMatrix::from_fn(indices.len(), indices.len(), |i, j| {
            self.matrix[(indices[i], indices[j])]
        });
        Self {
            matrix: m,
            sample_count: self.sample_count,
        }
    }

    /// A factor `L` with `L Lᵀ = R`, from the eigendecomposition with
    /// eigenvalues clipped at zero. Eigenvalues below `-PSD_TOLERANCE`
    /// are an error rather than something to repair.
    pub fn gaussian_factor(&self) -> Result<DMatrix<f64>> {
        let eig = SymmetricEigen::new(self.matrix.clone());
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -PSD_TOLERANCE {
            return Err(Error::NotPositiveSemidefinite {
                min_eigenvalue: min,
            });
        }
        let sqrt_vals = DVector::from_iterator(
            eig.eigenvalues.len(),
            eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
        );
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals))
    }
}

/// Empirical correlation of the columns of an n×K sample matrix.
pub fn correlation_matrix(samples: &DMatrix<f64>) -> Result<CorrelationEstimate> {
    let (n, k) = samples.shape();
    if n < 2 {
        return Err(Error::Dimension(format!(
            "correlation needs at least two rows, got {n}"
        )));
    }
    let means: Vec<f64> = (0..k).map(|j| samples.column(j).mean()).collect();
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for row in 0..n {
        for a in 0..k {
            let da = samples[(row, a)] - means[a];
            for b in a..k {
                cov[(a, b)] += da * (samples[(row, b)] - means[b]);
            }
        }
    }
    cov /= n as f64;
    for j in 0..k {
        if cov[(j, j)] < 1e-12 {
            return Err(Error::DegenerateColumn {
                column: j,
                variance: cov[(j, j)],
            });
        }
    }
    let scale: Vec<f64> = (0..k).map(|j| cov[(j, j)].sqrt()).collect();
    let matrix = DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            1.0
        } else {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            (cov[(lo, hi)] / (scale[a] * scale[b])).clamp(-1.0, 1.0)
        }
    });
    Ok(CorrelationEstimate {
        matrix,
        sample_count: n,
    })
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Draws `U ~ N(0, R)` row by row and hands each draw to `visit`.
///
/// The same `(R, draws, seed)` always produce the same draws, so callers
/// can use this for common-random-number comparisons.
pub fn for_each_gaussian_draw(
    correlation: &CorrelationEstimate,
    draws: usize,
    seed: u64,
    mut visit: impl FnMut(&[f64]),
) -> Result<()> {
    let factor = correlation.gaussian_factor()?;
    let k = correlation.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; k];
    let mut u = vec![0.0; k];
    for _ in 0..draws {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = (0..k).map(|j| factor[(i, j)] * z[j]).sum();
        }
        visit(&u);
    }
    Ok(())
}

/// Monte Carlo estimate of `P{U ≤ thresholds}` for `U ~ N(0, R)`.
pub fn mvn_orthant_probability(
    correlation: &CorrelationEstimate,
    thresholds: &[f64],
    draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    if thresholds.len() != correlation.dim() {
        return Err(Error::Dimension(format!(
            "{} thresholds for a {}-dimensional correlation",
            thresholds.len(),
            correlation.dim()
        )));
    }
    if let Some(&t) = thresholds.iter().find(|t| !t.is_finite()) {
        return Err(Error::domain("mvn_orthant_probability", t, "finite thresholds"));
    }
    if draws < 10_000 {
        return Err(Error::domain(
            "mvn_orthant_probability draws",
            draws as f64,
            "at least 1e4 draws",
        ));
    }
    let mut hits = 0usize;
    for_each_gaussian_draw(correlation, draws, seed, |u| {
        if u.iter().zip(thresholds).all(|(x, t)| x <= t) {
            hits += 1;
        }
    })?;
    let p = hits as f64 / draws as f64;
    Ok(McEstimate {
        value: p,
        std_error: (p * (1.0 - p) / draws as f64).sqrt(),
    })
}
