//! Base point predictor: a leave-one-out bootstrap ensemble of multivariate
//! linear regressors over flattened feature windows.

use rand::RngExt;

use crate::diffmath::Matrix;
use crate::scalar::Real;

#[derive(Debug, Clone, thiserror::Error)]
pub enum PredictorError {
    #[error("need at least {need} rows to fit, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("Gram matrix is singular beyond the ridge jitter")]
    SingularGram,
}

/// One least-squares model: weights (k·d_x + 1) × d_y, intercept last.
#[derive(Debug, Clone)]
pub struct LinearModel<R: Real> {
    pub weights: Matrix<R>,
}

impl<R: Real> LinearModel<R> {
    pub fn predict(&self, window: &[R]) -> Vec<R> {
        assert_eq!(
            window.len() + 1,
            self.weights.rows(),
            "window width mismatch"
        );
        let d_y = self.weights.cols();
        let mut out = vec![R::zero(); d_y];
        for (j, &x) in window.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.weights.row(j)) {
                *o = *o + x * w;
            }
        }
        for (o, &w) in out.iter_mut().zip(self.weights.row(window.len())) {
            *o = *o + w;
        }
        out
    }
}

/// Least squares via the normal equations with ridge jitter 1e−8 on the
/// Gram diagonal. `x` rows are flattened windows (no intercept column).
pub fn fit_linear<R: Real>(x: &Matrix<R>, y: &Matrix<R>) -> Result<LinearModel<R>, PredictorError> {
    let n = x.rows();
    let p = x.cols() + 1;
    if n < p {
        return Err(PredictorError::TooFewRows { need: p, got: n });
    }
    fit_linear_rows(x, y, &(0..n).collect::<Vec<_>>())
}

fn fit_linear_rows<R: Real>(
    x: &Matrix<R>,
    y: &Matrix<R>,
    rows: &[usize],
) -> Result<LinearModel<R>, PredictorError> {
    let p = x.cols() + 1;
    let d_y = y.cols();
    let jitter = R::of(1e-8);

    // Gram = Zᵀ Z and moment = Zᵀ Y over the selected rows, Z = [x | 1]
    let mut gram = Matrix::zeros(p, p);
    let mut moment = Matrix::zeros(p, d_y);
    let mut z = vec![R::zero(); p];
    for &r in rows {
        z[..p - 1].copy_from_slice(x.row(r));
        z[p - 1] = R::one();
        for i in 0..p {
            let zi = z[i];
            if zi == R::zero() {
                continue;
            }
            let grow = gram.row_mut(i);
            for (g, &zj) in grow.iter_mut().zip(&z) {
                *g = *g + zi * zj;
            }
            let mrow = moment.row_mut(i);
            for (m, &yv) in mrow.iter_mut().zip(y.row(r)) {
                *m = *m + zi * yv;
            }
        }
    }
    for i in 0..p {
        let v = gram.at(i, i) + jitter;
        gram.set(i, i, v);
    }

    let weights = cholesky_solve(&gram, &moment).ok_or(PredictorError::SingularGram)?;
    Ok(LinearModel { weights })
}

/// Solve the SPD system G W = B by Cholesky factorization.
fn cholesky_solve<R: Real>(g: &Matrix<R>, b: &Matrix<R>) -> Option<Matrix<R>> {
    let p = g.rows();
    let mut l = Matrix::zeros(p, p);
    for i in 0..p {
        for j in 0..=i {
            let mut sum = g.at(i, j);
            for k in 0..j {
                sum = sum - l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if sum <= R::zero() {
                    return None;
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.at(j, j));
            }
        }
    }
    // forward then back substitution, one outcome column at a time
    let d_y = b.cols();
    let mut w = Matrix::zeros(p, d_y);
    for c in 0..d_y {
        let mut u = vec![R::zero(); p];
        for i in 0..p {
            let mut sum = b.at(i, c);
            for k in 0..i {
                sum = sum - l.at(i, k) * u[k];
            }
            u[i] = sum / l.at(i, i);
        }
        for i in (0..p).rev() {
            let mut sum = u[i];
            for k in i + 1..p {
                sum = sum - l.at(k, i) * w.at(k, c);
            }
            w.set(i, c, sum / l.at(i, i));
        }
    }
    Some(w)
}

/// Bootstrap ensemble with per-model resample membership masks.
#[derive(Debug, Clone)]
pub struct Ensemble<R: Real> {
    pub models: Vec<LinearModel<R>>,
    /// contains[b][i]: whether training row i entered model b's resample
    pub contains: Vec<Vec<bool>>,
}

pub const DEFAULT_ENSEMBLE_SIZE: usize = 15;

/// Fit `b` models on with-replacement resamples of the rows of `x`/`y`.
pub fn fit_loo_bootstrap<R: Real>(
    rng: &mut impl RngExt,
    x: &Matrix<R>,
    y: &Matrix<R>,
    b: usize,
) -> Result<Ensemble<R>, PredictorError> {
    let n = x.rows();
    if n < 2 {
        return Err(PredictorError::TooFewRows { need: 2, got: n });
    }
    let mut models = Vec::with_capacity(b);
    let mut contains = Vec::with_capacity(b);
    for _ in 0..b {
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut mask = vec![false; n];
        for &r in &rows {
            mask[r] = true;
        }
        models.push(fit_linear_rows(x, y, &rows)?);
        contains.push(mask);
    }
    Ok(Ensemble { models, contains })
}

impl<R: Real> Ensemble<R> {
    /// Out-of-bag prediction: at a training index, average only the members
    /// whose resample excludes it (all members if none do or the index is
    /// out of the training range).
    pub fn predict(&self, window: &[R], at_index: Option<usize>) -> Vec<R> {
        let selected: Vec<usize> = match at_index {
            Some(i) if i < self.contains[0].len() => {
                let oob: Vec<usize> = (0..self.models.len())
                    .filter(|&b| !self.contains[b][i])
                    .collect();
                if oob.is_empty() {
                    (0..self.models.len()).collect()
                } else {
                    oob
                }
            }
            _ => (0..self.models.len()).collect(),
        };
        let d_y = self.models[0].weights.cols();
        let mut out = vec![R::zero(); d_y];
        let m = R::of_usize(selected.len());
        for b in selected {
            for (o, v) in out.iter_mut().zip(self.models[b].predict(window)) {
                *o = *o + v / m;
            }
        }
        out
    }
}
