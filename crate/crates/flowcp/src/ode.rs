//! Adaptive Dormand–Prince 5(4) integrator for the flow ODE, its inverse
//! (signed steps, same code path) and the divergence-augmented system that
//! accumulates log|det J|.

use crate::scalar::Real;

#[derive(Debug, Clone, thiserror::Error)]
pub enum OdeError {
    #[error("maximum step count exceeded ({0})")]
    MaxStepsExceeded(usize),
    #[error("non-finite state encountered at t = {t}")]
    NonFiniteState { t: f64 },
}

/// Solver tolerances and step control.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(bound = "")]
pub struct OdeConfig<R: Real> {
    pub abs_tol: R,
    pub rel_tol: R,
    /// First trial step as a fraction of the integration interval.
    pub initial_step: R,
    pub max_steps: usize,
    pub safety: R,
}

impl<R: Real> Default for OdeConfig<R> {
    fn default() -> Self {
        OdeConfig {
            abs_tol: R::of(1e-5),
            rel_tol: R::of(1e-5),
            initial_step: R::of(1e-2),
            max_steps: 100_000,
            safety: R::of(0.9),
        }
    }
}

impl<R: Real> OdeConfig<R> {
    pub fn with_tols(abs_tol: R, rel_tol: R) -> Self {
        OdeConfig {
            abs_tol,
            rel_tol,
            ..Default::default()
        }
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// 5th-order weights equal the last tableau row (FSAL).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
// Difference between the 5th- and embedded 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const ORDER: f64 = 5.0;
const STEP_SHRINK_LIMIT: f64 = 0.2;
const STEP_GROW_LIMIT: f64 = 5.0;

struct DormandPrince<'a, R: Real, F: FnMut(R, &[R]) -> Vec<R>> {
    f: &'a mut F,
    cfg: OdeConfig<R>,
    dim: usize,
    stages: [Vec<R>; 7],
}

impl<'a, R: Real, F: FnMut(R, &[R]) -> Vec<R>> DormandPrince<'a, R, F> {
    fn new(f: &'a mut F, cfg: OdeConfig<R>, dim: usize) -> Self {
        let stages = std::array::from_fn(|_| vec![R::zero(); dim]);
        DormandPrince {
            f,
            cfg,
            dim,
            stages,
        }
    }

    /// One trial step from (t, y) with (signed) step h. Returns the 5th-order
    /// candidate and the scaled error norm.
    fn step(&mut self, t: R, y: &[R], h: R, k1: &[R]) -> (Vec<R>, R) {
        self.stages[0].copy_from_slice(k1);
        let mut ytmp = vec![R::zero(); self.dim];
        for s in 1..7 {
            for (i, yt) in ytmp.iter_mut().enumerate() {
                let mut acc = R::zero();
                for (j, stage) in self.stages.iter().enumerate().take(s) {
                    let a = A[s][j];
                    if a != 0.0 {
                        acc = acc + R::of(a) * stage[i];
                    }
                }
                *yt = y[i] + h * acc;
            }
            self.stages[s] = (self.f)(t + R::of(C[s]) * h, &ytmp);
        }

        let mut y_next = vec![R::zero(); self.dim];
        let mut err_sq = R::zero();
        for i in 0..self.dim {
            let mut sum5 = R::zero();
            let mut sume = R::zero();
            for (j, stage) in self.stages.iter().enumerate() {
                if B5[j] != 0.0 {
                    sum5 = sum5 + R::of(B5[j]) * stage[i];
                }
                if E[j] != 0.0 {
                    sume = sume + R::of(E[j]) * stage[i];
                }
            }
            y_next[i] = y[i] + h * sum5;
            let scale = self.cfg.abs_tol + self.cfg.rel_tol * y[i].abs().max(y_next[i].abs());
            let e = h * sume / scale;
            err_sq = err_sq + e * e;
        }
        let err = (err_sq / R::of_usize(self.dim)).sqrt();
        (y_next, err)
    }
}

/// Integrate `dy/dt = f(t, y)` from `t0` to `t1` (either direction) with
/// PI-controlled adaptive steps.
pub fn integrate<R: Real>(
    mut f: impl FnMut(R, &[R]) -> Vec<R>,
    y0: &[R],
    t0: R,
    t1: R,
    cfg: &OdeConfig<R>,
) -> Result<Vec<R>, OdeError> {
    if t0 == t1 {
        return Ok(y0.to_vec());
    }
    let dim = y0.len();
    let span = t1 - t0;
    let direction = span.signum();
    let mut h = cfg.initial_step * span.abs() * direction;
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = f(t, &y);
    if k1.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::NonFiniteState { t: t.f64() });
    }

    let mut solver = DormandPrince::new(&mut f, *cfg, dim);
    let alpha = R::of(0.7 / ORDER);
    let beta = R::of(0.4 / ORDER);
    let mut err_prev = R::one();
    let mut steps = 0usize;

    while (t1 - t) * direction > R::zero() {
        if steps >= cfg.max_steps {
            return Err(OdeError::MaxStepsExceeded(cfg.max_steps));
        }
        steps += 1;

        // Do not step past the endpoint.
        if (t + h - t1) * direction > R::zero() {
            h = t1 - t;
        }

        let (y_next, err) = solver.step(t, &y, h, &k1);
        if !err.is_finite() || y_next.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFiniteState { t: t.f64() });
        }

        let err_floor = R::of(1e-10);
        let fac = cfg.safety * err.max(err_floor).powf(-alpha) * err_prev.powf(beta);
        let fac = fac
            .min(R::of(STEP_GROW_LIMIT))
            .max(R::of(STEP_SHRINK_LIMIT));

        if err <= R::one() {
            t = t + h;
            y = y_next;
            // FSAL: the 7th stage is f at the accepted point.
            k1 = solver.stages[6].clone();
            err_prev = err.max(err_floor);
            h = h * fac;
        } else {
            h = h * fac.min(R::one());
        }
    }
    Ok(y)
}

/// Jointly integrate the state and the divergence, yielding the endpoint and
/// the accumulated log|det J| of the flow map (zero at the start point).
pub fn integrate_augmented<R: Real>(
    mut f: impl FnMut(R, &[R]) -> Vec<R>,
    mut div_f: impl FnMut(R, &[R]) -> R,
    x0: &[R],
    t0: R,
    t1: R,
    cfg: &OdeConfig<R>,
) -> Result<(Vec<R>, R), OdeError> {
    let dim = x0.len();
    let mut aug0 = x0.to_vec();
    aug0.push(R::zero());
    let aug = integrate(
        |t, state: &[R]| {
            let x = &state[..dim];
            let mut rhs = f(t, x);
            rhs.push(div_f(t, x));
            rhs
        },
        &aug0,
        t0,
        t1,
        cfg,
    )?;
    let logdet = aug[dim];
    Ok((aug[..dim].to_vec(), logdet))
}
