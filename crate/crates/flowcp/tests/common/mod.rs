//! Shared test oracles, kept independent of the implementation paths they
//! check: central finite differences, a series-based erf CDF, and quantile
//! bisection.

use flowcp::diffmath::{Matrix, ParamStore};

/// Central-difference gradient of a scalar function of the store, one entry
/// at a time.
pub fn fd_param_grad(
    store: &ParamStore<f64>,
    f: &mut dyn FnMut(&ParamStore<f64>) -> f64,
    step: f64,
) -> Vec<Matrix<f64>> {
    let mut grads = Vec::with_capacity(store.len());
    let mut work = store.clone();
    for id in 0..store.len() {
        let (rows, cols) = store.by_id(id).shape();
        let mut g = Matrix::zeros(rows, cols);
        for k in 0..rows * cols {
            let orig = store.by_id(id).data()[k];
            work.by_id_mut(id).data_mut()[k] = orig + step;
            let up = f(&work);
            work.by_id_mut(id).data_mut()[k] = orig - step;
            let down = f(&work);
            work.by_id_mut(id).data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Central-difference Jacobian of a vector map.
pub fn fd_jacobian(f: &mut dyn FnMut(&[f64]) -> Vec<f64>, x: &[f64], step: f64) -> Matrix<f64> {
    let d_in = x.len();
    let d_out = f(x).len();
    let mut jac = Matrix::zeros(d_out, d_in);
    let mut xp = x.to_vec();
    for j in 0..d_in {
        xp[j] = x[j] + step;
        let up = f(&xp);
        xp[j] = x[j] - step;
        let down = f(&xp);
        xp[j] = x[j];
        for i in 0..d_out {
            jac.set(i, j, (up[i] - down[i]) / (2.0 * step));
        }
    }
    jac
}

/// max |a − b| / max(|b|, floor) over matching entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}

/// erf by its alternating Maclaurin series; accurate to ~1e-15 for |x| ≤ 3,
/// which covers every quantile the tests touch.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        let nf = n as f64;
        term *= -x * x / nf;
        let contrib = term / (2.0 * nf + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

/// P(χ₁ ≤ q) = erf(q/√2).
pub fn chi1_cdf(q: f64) -> f64 {
    erf_series(q / std::f64::consts::SQRT_2)
}

/// Bisection quantile inversion of a monotone CDF.
pub fn bisect_quantile(cdf: &dyn Fn(f64) -> f64, p: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    0.5 * (lo + hi)
}
