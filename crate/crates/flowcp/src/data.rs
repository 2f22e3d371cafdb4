//! Dataset ingestion, chronological splits, sliding windows and a synthetic
//! VAR(1) generator for desk-scale verification.
//!
//! CSV schema: `timestamp, x_1..x_{d_x}, y_1..y_{d_y}[, yhat_1..yhat_{d_y}]`
//! with a header row, `.` decimal separator, LF or CRLF line endings.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::diffmath::Matrix;
use crate::flow::standard_normal;
use crate::scalar::Real;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("malformed row at line {0}")]
    MalformedRow(usize),
    #[error("non-monotone timestamp at line {0}")]
    NonMonotoneTimestamp(usize),
    #[error("non-finite value at line {line}, column {col}")]
    NaNValue { line: usize, col: usize },
    #[error("header mismatch: expected {expected} or {with_pred} columns, got {got}")]
    HeaderMismatch {
        expected: usize,
        with_pred: usize,
        got: usize,
    },
    #[error("series too short: {0} rows")]
    TooShort(usize),
    #[error("VAR(1) coupling {0} is unstable (spectral radius must be < 1)")]
    UnstableSystem(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Aligned feature/outcome sequences with strictly increasing timestamps.
#[derive(Debug, Clone)]
pub struct SeriesDataset<R: Real> {
    pub timestamps: Vec<f64>,
    /// T × d_x features
    pub features: Matrix<R>,
    /// T × d_y outcomes
    pub outcomes: Matrix<R>,
    /// optional precomputed point predictions, T × d_y
    pub predictions: Option<Matrix<R>>,
    /// true additive noise of the generator, kept for oracle checks only
    pub true_noise: Option<Matrix<R>>,
}

impl<R: Real> SeriesDataset<R> {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.features.cols()
    }

    pub fn d_y(&self) -> usize {
        self.outcomes.cols()
    }

    /// Drop the first `start` rows (a leading holdout consumed by an
    /// external predictor); the remainder becomes the evaluation sequence.
    pub fn suffix(&self, start: usize) -> SeriesDataset<R> {
        assert!(start < self.len(), "holdout swallows the whole series");
        let take = |m: &Matrix<R>| {
            let mut out = Matrix::zeros(self.len() - start, m.cols());
            for (r, src) in (start..self.len()).enumerate() {
                out.row_mut(r).copy_from_slice(m.row(src));
            }
            out
        };
        SeriesDataset {
            timestamps: self.timestamps[start..].to_vec(),
            features: take(&self.features),
            outcomes: take(&self.outcomes),
            predictions: self.predictions.as_ref().map(&take),
            true_noise: self.true_noise.as_ref().map(&take),
        }
    }
}

/// Contiguous chronological train/validation/test ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: std::ops::Range<usize>,
    pub validation: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

/// First 80% trains, the final 20% splits evenly into validation and test
/// (validation takes the ceiling).
pub fn make_splits(t: usize) -> Result<SplitPlan, DataError> {
    if t < 10 {
        return Err(DataError::TooShort(t));
    }
    let train_end = (4 * t) / 5; // ⌊0.8T⌋
    let val_len = t.div_ceil(10); // ⌈0.1T⌉
    let val_end = (train_end + val_len).min(t);
    Ok(SplitPlan {
        train: 0..train_end,
        validation: train_end..val_end,
        test: val_end..t,
    })
}

/// One item per index i ≥ k: the k most recent feature rows x_{i−k..i−1},
/// the outcome y_i and the index itself.
pub struct WindowItem<'a, R: Real> {
    pub index: usize,
    pub window: Vec<&'a [R]>,
    pub outcome: &'a [R],
}

pub fn sliding_windows<R: Real>(ds: &SeriesDataset<R>, k: usize) -> Vec<WindowItem<'_, R>> {
    assert!(
        k >= 1 && k < ds.len(),
        "window length must satisfy 1 <= k < T"
    );
    (k..ds.len())
        .map(|i| WindowItem {
            index: i,
            window: (i - k..i).map(|j| ds.features.row(j)).collect(),
            outcome: ds.outcomes.row(i),
        })
        .collect()
}

pub fn load_csv<R: Real>(
    path: impl AsRef<Path>,
    d_x: usize,
    d_y: usize,
) -> Result<SeriesDataset<R>, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), d_x, d_y)
}

pub fn read_csv<R: Real>(
    reader: impl BufRead,
    d_x: usize,
    d_y: usize,
) -> Result<SeriesDataset<R>, DataError> {
    let base_cols = 1 + d_x + d_y;
    let pred_cols = base_cols + d_y;
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or(DataError::MalformedRow(1))?
        .map_err(DataError::Io)?;
    let header_cols = header.trim_end_matches('\r').split(',').count();
    let has_pred = if header_cols == base_cols {
        false
    } else if header_cols == pred_cols {
        true
    } else {
        return Err(DataError::HeaderMismatch {
            expected: base_cols,
            with_pred: pred_cols,
            got: header_cols,
        });
    };

    let mut timestamps = Vec::new();
    let mut features = Vec::new();
    let mut outcomes = Vec::new();
    let mut predictions = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2; // 1-based, after the header
        let line = line.map_err(DataError::Io)?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let want = if has_pred { pred_cols } else { base_cols };
        if cells.len() != want {
            return Err(DataError::MalformedRow(lineno));
        }
        let parse = |col: usize| -> Result<f64, DataError> {
            let v: f64 = cells[col]
                .trim()
                .parse()
                .map_err(|_| DataError::MalformedRow(lineno))?;
            if !v.is_finite() {
                return Err(DataError::NaNValue { line: lineno, col });
            }
            Ok(v)
        };
        let ts = parse(0)?;
        if let Some(&last) = timestamps.last() {
            if ts <= last {
                return Err(DataError::NonMonotoneTimestamp(lineno));
            }
        }
        timestamps.push(ts);
        for c in 0..d_x {
            features.push(R::of(parse(1 + c)?));
        }
        for c in 0..d_y {
            outcomes.push(R::of(parse(1 + d_x + c)?));
        }
        if has_pred {
            for c in 0..d_y {
                predictions.push(R::of(parse(1 + d_x + d_y + c)?));
            }
        }
    }
    let t = timestamps.len();
    Ok(SeriesDataset {
        timestamps,
        features: Matrix::from_vec(t, d_x, features),
        outcomes: Matrix::from_vec(t, d_y, outcomes),
        predictions: if has_pred {
            Some(Matrix::from_vec(t, d_y, predictions))
        } else {
            None
        },
        true_noise: None,
    })
}

pub fn save_csv<R: Real>(ds: &SeriesDataset<R>, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(ds, &mut f)
}

pub fn write_csv<R: Real>(ds: &SeriesDataset<R>, w: &mut impl Write) -> Result<(), DataError> {
    let mut header: Vec<String> = vec!["timestamp".into()];
    header.extend((1..=ds.d_x()).map(|i| format!("x_{i}")));
    header.extend((1..=ds.d_y()).map(|i| format!("y_{i}")));
    if ds.predictions.is_some() {
        header.extend((1..=ds.d_y()).map(|i| format!("yhat_{i}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..ds.len() {
        let mut cells: Vec<String> = vec![format!("{}", ds.timestamps[i])];
        cells.extend(ds.features.row(i).iter().map(|v| format!("{v}")));
        cells.extend(ds.outcomes.row(i).iter().map(|v| format!("{v}")));
        if let Some(p) = &ds.predictions {
            cells.extend(p.row(i).iter().map(|v| format!("{v}")));
        }
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Outcome-noise law of the synthetic generator.
#[derive(Debug, Clone, Copy)]
pub enum NoiseSpec {
    /// N(0, σ²I)
    Isotropic { sigma: f64 },
    /// scale = base + amp · sigmoid(2·x₁): noise level driven by the state,
    /// which is what the guided flow is supposed to pick up
    StateScaled { base: f64, amp: f64 },
}

impl NoiseSpec {
    fn scale_at(&self, x: &[f64]) -> f64 {
        match *self {
            NoiseSpec::Isotropic { sigma } => sigma,
            NoiseSpec::StateScaled { base, amp } => base + amp / (1.0 + (-2.0 * x[0]).exp()),
        }
    }
}

/// VAR(1) features x_i = A x_{i−1} + ν_i with A a rotation scaled by
/// `coupling`, outcomes y_i = C x_i + ε_i. The true ε_i are recorded for
/// oracle checks.
pub fn synth_var<R: Real>(
    seed: u64,
    t: usize,
    d: usize,
    coupling: f64,
    noise: NoiseSpec,
) -> Result<SeriesDataset<R>, DataError> {
    use rand::SeedableRng;
    if coupling.abs() >= 1.0 {
        return Err(DataError::UnstableSystem(coupling));
    }
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let a = rotation_matrix(d, coupling);
    // mildly non-diagonal readout
    let mut c = vec![vec![0.0; d]; d];
    for i in 0..d {
        c[i][i] = 1.0;
        c[i][(i + 1) % d] = 0.3;
    }

    let nu_scale = 0.3;
    let mut x = vec![0.0f64; d];
    let mut features = Vec::with_capacity(t * d);
    let mut outcomes = Vec::with_capacity(t * d);
    let mut noise_rec = Vec::with_capacity(t * d);
    for _ in 0..t {
        let mut next = vec![0.0f64; d];
        for i in 0..d {
            for j in 0..d {
                next[i] += a[i][j] * x[j];
            }
            next[i] += standard_normal::<f64>(&mut rng) * nu_scale;
        }
        x = next;
        let s = noise.scale_at(&x);
        for i in 0..d {
            let mut y = 0.0;
            for j in 0..d {
                y += c[i][j] * x[j];
            }
            let eps = standard_normal::<f64>(&mut rng) * s;
            features.push(R::of(x[i]));
            outcomes.push(R::of(y + eps));
            noise_rec.push(R::of(eps));
        }
    }
    Ok(SeriesDataset {
        timestamps: (0..t).map(|i| i as f64).collect(),
        features: Matrix::from_vec(t, d, features),
        outcomes: Matrix::from_vec(t, d, outcomes),
        predictions: None,
        true_noise: Some(Matrix::from_vec(t, d, noise_rec)),
    })
}

/// Block-rotation matrix scaled by `coupling` (spectral radius |coupling|).
fn rotation_matrix(d: usize, coupling: f64) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; d]; d];
    let mut i = 0;
    let mut block = 0usize;
    while i + 1 < d {
        let theta = 0.6 + 0.25 * block as f64;
        a[i][i] = coupling * theta.cos();
        a[i][i + 1] = -coupling * theta.sin();
        a[i + 1][i] = coupling * theta.sin();
        a[i + 1][i + 1] = coupling * theta.cos();
        i += 2;
        block += 1;
    }
    if i < d {
        a[i][i] = coupling;
    }
    a
}

/// Per-column mean/std computed on the training rows, applied everywhere.
#[derive(Debug, Clone)]
pub struct Standardizer<R: Real> {
    pub mean: Vec<R>,
    pub std: Vec<R>,
}

impl<R: Real> Standardizer<R> {
    pub fn fit(features: &Matrix<R>, rows: std::ops::Range<usize>) -> Self {
        let d = features.cols();
        let n = R::of_usize(rows.len().max(1));
        let mut mean = vec![R::zero(); d];
        for r in rows.clone() {
            for (m, &v) in mean.iter_mut().zip(features.row(r)) {
                *m = *m + v / n;
            }
        }
        let mut std = vec![R::zero(); d];
        for r in rows {
            for (s, (&v, &m)) in std.iter_mut().zip(features.row(r).iter().zip(&mean)) {
                *s = *s + (v - m) * (v - m) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt();
            if *s < R::of(1e-12) {
                *s = R::one();
            }
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, features: &Matrix<R>) -> Matrix<R> {
        let mut out = features.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}
