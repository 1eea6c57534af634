//! Spearman rank correlation, chi-squared goodness of fit, and the rank and
//! count helpers they need. Generic over the float type; significance tails
//! are evaluated in `f64`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

use crate::Scalar;

/// Floor applied to expected proportions before building expected counts.
pub const EXPECTED_FLOOR: f64 = 1e-6;

/// Below this sample size Spearman significance is computed by enumerating
/// every permutation instead of the t approximation.
pub const EXACT_P_MAX_N: usize = 9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("n < 3 (got {0})")]
    TooFewSamples(usize),
    #[error("zero variance in ranks; correlation undefined")]
    ZeroVariance,
    #[error("observed counts are all zero")]
    AllZeroObserved,
    #[error("invalid proportions: {0}")]
    InvalidProportions(String),
    #[error("negative statistic {0}")]
    NegativeStatistic(f64),
    #[error("degrees of freedom must be positive")]
    InvalidDegreesOfFreedom,
    #[error("non-finite input")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    StudentT,
    ExactPermutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult<F> {
    pub rho: F,
    pub p_value: F,
    pub n: usize,
    pub significant: bool,
    pub method: PValueMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquaredResult<F> {
    pub statistic: F,
    pub df: u32,
    pub p_value: F,
    pub significant: bool,
    /// At least one expected proportion was raised to [`EXPECTED_FLOOR`].
    pub clamped: bool,
}

/// 1-based ranks, tied values sharing the mean of the ranks they span.
pub fn average_ranks<F: Scalar>(values: &[F]) -> Vec<F> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut ranks = vec![F::zero(); values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, averaged
        let avg = F::of((start + 1 + end) as f64 / 2.0);
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson<F: Scalar>(x: &[F], y: &[F]) -> Result<F, StatsError> {
    let n = F::of(x.len() as f64);
    let mx = x.iter().fold(F::zero(), |a, &v| a + v) / n;
    let my = y.iter().fold(F::zero(), |a, &v| a + v) / n;
    let (mut sxy, mut sxx, mut syy) = (F::zero(), F::zero(), F::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx <= F::zero() || syy <= F::zero() {
        return Err(StatsError::ZeroVariance);
    }
    let r = sxy / (sxx * syy).sqrt();
    Ok(r.max(-F::one()).min(F::one()))
}

/// Spearman's rho with a two-sided p-value: t approximation with n − 2
/// degrees of freedom, or exact enumeration for n ≤ [`EXACT_P_MAX_N`].
pub fn spearman<F: Scalar>(x: &[F], y: &[F], alpha: F) -> Result<CorrelationResult<F>, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFewSamples(n));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rho = pearson(&rx, &ry)?;

    let (p, method) = if n <= EXACT_P_MAX_N {
        let rx: Vec<f64> = rx.iter().map(|v| v.as_f64()).collect();
        let ry: Vec<f64> = ry.iter().map(|v| v.as_f64()).collect();
        (
            exact_permutation_p(&rx, &ry),
            PValueMethod::ExactPermutation,
        )
    } else {
        (t_test_p(rho.as_f64(), n), PValueMethod::StudentT)
    };
    let p_value = F::of(p);
    Ok(CorrelationResult {
        rho,
        p_value,
        n,
        significant: p_value < alpha,
        method,
    })
}

fn t_test_p(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

/// Fraction of the n! re-pairings of `ry` against `rx` whose |rho| is at
/// least the observed one. Uses the centered cross-product, which is
/// proportional to rho because both rank multisets stay fixed.
fn exact_permutation_p(rx: &[f64], ry: &[f64]) -> f64 {
    let n = rx.len();
    let mean = (n as f64 + 1.0) / 2.0;
    let cx: Vec<f64> = rx.iter().map(|v| v - mean).collect();
    let mut cy: Vec<f64> = ry.iter().map(|v| v - mean).collect();
    let cross = |cy: &[f64]| cx.iter().zip(cy).map(|(a, b)| a * b).sum::<f64>();
    let observed = cross(&cy).abs();
    let threshold = observed - 1e-9 * (1.0 + observed);

    // Heap's algorithm, iterative.
    let mut c = vec![0usize; n];
    let (mut hits, mut total) = (0u64, 0u64);
    let mut tally = |cy: &[f64]| {
        total += 1;
        if cross(cy).abs() >= threshold {
            hits += 1;
        }
    };
    tally(&cy);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                cy.swap(0, i);
            } else {
                cy.swap(c[i], i);
            }
            tally(&cy);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

/// Upper tail of the chi-squared distribution. `df == 2` uses the closed
/// form `exp(-x/2)`; other df go through the regularized incomplete gamma.
pub fn chi2_survival<F: Scalar>(x: F, df: u32) -> Result<F, StatsError> {
    if df == 0 {
        return Err(StatsError::InvalidDegreesOfFreedom);
    }
    if x.is_nan() {
        return Err(StatsError::NonFinite);
    }
    if x < F::zero() {
        return Err(StatsError::NegativeStatistic(x.as_f64()));
    }
    if x.is_infinite() {
        return Ok(F::zero());
    }
    if df == 2 {
        return Ok((-x / F::of(2.0)).exp());
    }
    Ok(F::of(gamma_ur(df as f64 / 2.0, x.as_f64() / 2.0)))
}

/// Pearson goodness of fit of `observed` counts against `expected`
/// proportions. Expected proportions are floored at [`EXPECTED_FLOOR`] and
/// renormalized, then scaled to the observed total.
pub fn chi_squared_gof<F: Scalar>(
    observed: &[u64],
    expected: &[F],
    alpha: F,
) -> Result<ChiSquaredResult<F>, StatsError> {
    if observed.len() != expected.len() {
        return Err(StatsError::LengthMismatch(observed.len(), expected.len()));
    }
    if observed.len() < 2 {
        return Err(StatsError::InvalidProportions(
            "need at least 2 categories".into(),
        ));
    }
    if let Some(p) = expected.iter().find(|p| !p.is_finite() || **p < F::zero()) {
        return Err(StatsError::InvalidProportions(format!(
            "{p} is not a proportion"
        )));
    }
    let sum = expected.iter().fold(F::zero(), |a, &p| a + p);
    if (sum - F::one()).abs() > F::of(1e-6) {
        return Err(StatsError::InvalidProportions(format!("sum {sum} ≠ 1")));
    }
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return Err(StatsError::AllZeroObserved);
    }

    let floor = F::of(EXPECTED_FLOOR);
    let clamped = expected.iter().any(|&p| p < floor);
    let floored: Vec<F> = expected.iter().map(|&p| p.max(floor)).collect();
    let norm = floored.iter().fold(F::zero(), |a, &p| a + p);
    let n = F::of(total as f64);
    let statistic = observed
        .iter()
        .zip(&floored)
        .fold(F::zero(), |acc, (&o, &p)| {
            let e = p / norm * n;
            let d = F::of(o as f64) - e;
            acc + d * d / e
        });
    let df = (observed.len() - 1) as u32;
    let p_value = chi2_survival(statistic, df)?;
    Ok(ChiSquaredResult {
        statistic,
        df,
        p_value,
        significant: p_value < alpha,
        clamped,
    })
}

/// Splits `total` into integer parts proportional to `weights` (largest
/// remainder, ties to the lower index); the parts sum to `total` exactly.
pub fn largest_remainder(weights: &[f64], total: u64) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 || !sum.is_finite() {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut parts: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let assigned: u64 = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned) as usize) {
        parts[i] += 1;
    }
    parts
}

/// Observed counts behind a set of response rates over `n` respondents.
pub fn counts_from_rates(rates: &[f64], n: u32) -> Vec<u64> {
    largest_remainder(rates, n as u64)
}
