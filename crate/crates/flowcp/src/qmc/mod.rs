//! Quasi-Monte Carlo machinery: Sobol streams, uniform sampling inside
//! Euclidean balls, and the relative-standard-error rule for choosing the
//! sample count N.

mod joe_kuo;
mod sobol;

pub use sobol::SobolStream;

use crate::scalar::Real;
use crate::special::norm_ppf;

#[derive(Debug, Clone, thiserror::Error)]
pub enum QmcError {
    #[error("dimension {dimension} outside the direction-number table (1..={max})")]
    UnsupportedDimension { dimension: usize, max: usize },
    #[error("relative standard error needs at least two values")]
    TooFewValues,
    #[error("relative standard error undefined for zero mean")]
    ZeroMean,
    #[error("SE gate {gate} unreachable at N = {max}")]
    GateUnreachable { gate: f64, max: usize },
}

/// Map a point of `[0,1)^{d+1}` to the ball of radius `r` in `R^d`:
/// Gaussian direction from the first d coordinates, radius from the last via
/// the inverse radial CDF u^{1/d}. Uniform on the ball for uniform input.
pub fn ball_point<R: Real>(u: &[R], d: usize, r: R) -> Vec<R> {
    assert_eq!(u.len(), d + 1, "ball mapping needs d+1 coordinates");
    let clamp = |v: R| v.max(R::of(1e-12)).min(R::of(1.0 - 1e-12));
    let mut z: Vec<R> = u[..d]
        .iter()
        .map(|&v| norm_ppf::<R>(clamp(v).f64()))
        .collect();
    let norm = z.iter().fold(R::zero(), |a, &v| a + v * v).sqrt();
    if norm == R::zero() {
        return vec![R::zero(); d];
    }
    let radius = r * u[d].powf(R::one() / R::of_usize(d));
    for v in &mut z {
        *v = *v / norm * radius;
    }
    z
}

/// Sobol-backed sampler emitting points uniformly inside the d-ball.
#[derive(Debug, Clone)]
pub struct BallSampler<R: Real> {
    dim: usize,
    radius: R,
    stream: SobolStream,
}

impl<R: Real> BallSampler<R> {
    pub fn new(dim: usize, radius: R) -> Result<Self, QmcError> {
        Ok(BallSampler {
            dim,
            radius,
            stream: SobolStream::new(dim + 1)?,
        })
    }

    pub fn next_point(&mut self) -> Vec<R> {
        let u = self.stream.next_point::<R>();
        ball_point(&u, self.dim, self.radius)
    }

    pub fn take_points(&mut self, n: usize) -> Vec<Vec<R>> {
        (0..n).map(|_| self.next_point()).collect()
    }
}

/// (sample std / √N) / |mean|.
pub fn relative_se<R: Real>(values: &[R]) -> Result<R, QmcError> {
    if values.len() < 2 {
        return Err(QmcError::TooFewValues);
    }
    let n = R::of_usize(values.len());
    let mean = values.iter().fold(R::zero(), |a, &v| a + v) / n;
    if mean == R::zero() {
        return Err(QmcError::ZeroMean);
    }
    let var = values
        .iter()
        .fold(R::zero(), |a, &v| a + (v - mean) * (v - mean))
        / (n - R::one());
    Ok(var.sqrt() / n.sqrt() / mean.abs())
}

/// Double N from `start` until the relative SE of `evaluator(N)` drops below
/// `gate`, capping at `max`.
pub fn select_sample_size<R: Real>(
    mut evaluator: impl FnMut(usize) -> Vec<R>,
    start: usize,
    gate: R,
    max: usize,
) -> Result<usize, QmcError> {
    assert!(
        start >= 2 && start.is_power_of_two(),
        "start must be a power of two"
    );
    let mut n = start;
    loop {
        let values = evaluator(n);
        if relative_se(&values)? < gate {
            return Ok(n);
        }
        if n >= max {
            return Err(QmcError::GateUnreachable {
                gate: gate.f64(),
                max,
            });
        }
        n = (n * 2).min(max);
    }
}
