//! Coverage and size metrics: empirical coverage, trailing rolling coverage,
//! and the per-run evaluation report.

use crate::scalar::Real;

#[derive(Debug, Clone, thiserror::Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("need at least {need} indicators for rolling window, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("indicator and size lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Per-run evaluation summary.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(bound = "")]
pub struct EvalReport<R: Real> {
    pub empirical_coverage: R,
    pub average_size: R,
    pub size_std: R,
    pub rolling_coverage: Vec<R>,
    pub covered: Vec<bool>,
    pub sizes: Vec<R>,
}

/// Fraction of covered outcomes.
pub fn empirical_coverage<R: Real>(indicators: &[bool]) -> Result<R, EvalError> {
    if indicators.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits = indicators.iter().filter(|&&c| c).count();
    Ok(R::of_usize(hits) / R::of_usize(indicators.len()))
}

/// Trailing-window coverage: value at i is the mean of positions
/// i−m+1..=i, defined for i ≥ m−1.
pub fn rolling_coverage<R: Real>(indicators: &[bool], m: usize) -> Result<Vec<R>, EvalError> {
    if m == 0 || indicators.len() < m {
        return Err(EvalError::TooShort {
            need: m.max(1),
            got: indicators.len(),
        });
    }
    let mf = R::of_usize(m);
    let mut hits = indicators[..m].iter().filter(|&&c| c).count() as isize;
    let mut out = vec![R::of_usize(hits as usize) / mf];
    for i in m..indicators.len() {
        hits += indicators[i] as isize - indicators[i - m] as isize;
        out.push(R::of_usize(hits as usize) / mf);
    }
    Ok(out)
}

pub const DEFAULT_ROLLING_WINDOW: usize = 20;

/// Assemble the report; `size_std` is the sample standard deviation.
pub fn summarize<R: Real>(indicators: &[bool], sizes: &[R]) -> Result<EvalReport<R>, EvalError> {
    if indicators.len() != sizes.len() {
        return Err(EvalError::LengthMismatch(indicators.len(), sizes.len()));
    }
    let coverage = empirical_coverage::<R>(indicators)?;
    let n = R::of_usize(sizes.len());
    let mean = sizes.iter().fold(R::zero(), |a, &v| a + v) / n;
    let std = if sizes.len() > 1 {
        (sizes
            .iter()
            .fold(R::zero(), |a, &v| a + (v - mean) * (v - mean))
            / (n - R::one()))
        .sqrt()
    } else {
        R::zero()
    };
    let rolling = if indicators.len() >= DEFAULT_ROLLING_WINDOW {
        rolling_coverage(indicators, DEFAULT_ROLLING_WINDOW)?
    } else {
        Vec::new()
    };
    Ok(EvalReport {
        empirical_coverage: coverage,
        average_size: mean,
        size_std: std,
        rolling_coverage: rolling,
        covered: indicators.to_vec(),
        sizes: sizes.to_vec(),
    })
}
