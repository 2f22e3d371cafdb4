//! End-to-end orchestration: fit the base predictor, compute residuals,
//! train the guided flow with validation-loss model selection, checkpoint,
//! and evaluate coverage and set sizes on the test split.

use std::io::{Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};

use crate::conformal::{set_size, ConformalError, Radius};
use crate::data::{make_splits, DataError, SeriesDataset, Standardizer};
use crate::diffmath::{AdamState, DiffError, Matrix, ParamStore};
use crate::encoder::{ContextWindow, EncoderConfig};
use crate::eval::{rolling_coverage, EvalError, DEFAULT_ROLLING_WINDOW};
use crate::flow::{
    matching_loss, standard_normal, train_step, FlowConfig, FlowError, GuidedFlowModel, ModelSpec,
    ValidationItem,
};
use crate::ode::OdeConfig;
use crate::predictor::{
    fit_loo_bootstrap, Ensemble, LinearModel, PredictorError, DEFAULT_ENSEMBLE_SIZE,
};
use crate::qmc::relative_se;
use crate::scalar::Real;
use crate::special::SpecialError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Special(#[from] SpecialError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("test index {index} outside the test range {start}..{end}")]
    IndexOutOfRange {
        index: usize,
        start: usize,
        end: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Sample-count policy for the set-size estimator.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NPolicy {
    Fixed {
        n: usize,
    },
    /// double N from `start` until the average relative SE of the Jacobian
    /// determinants across sampled guidances falls below `gate`
    AutoGate {
        start: usize,
        gate: f64,
        max: usize,
    },
}

/// Per-d_y defaults for the fixed sample count.
pub fn default_sample_count(d_y: usize) -> usize {
    match d_y {
        0..=2 => 4096,
        3..=4 => 8192,
        _ => 16384,
    }
}

/// Full run configuration; flags mirror the config-file keys.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
#[serde(bound = "")]
pub struct RunConfig<R: Real> {
    pub dataset: String,
    pub d_x: usize,
    pub d_y: usize,
    pub alpha: R,
    /// predictor window length
    pub k: usize,
    /// encoder context window length
    pub window: usize,
    pub flow: FlowConfig<R>,
    pub encoder: EncoderConfig,
    pub ode: OdeConfig<R>,
    pub n_policy: NPolicy,
    pub ensemble_size: usize,
    /// leading fraction of the series reserved for an external predictor;
    /// splits apply to the remainder
    pub predictor_holdout: f64,
    pub seed: u64,
    pub out_dir: String,
}

impl<R: Real> Default for RunConfig<R> {
    fn default() -> Self {
        RunConfig {
            dataset: String::new(),
            d_x: 2,
            d_y: 2,
            alpha: R::of(0.05),
            k: 50,
            window: 50,
            flow: FlowConfig::default(),
            encoder: EncoderConfig::default(),
            ode: OdeConfig::default(),
            n_policy: NPolicy::Fixed { n: 0 }, // 0 = per-d_y default
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
            predictor_holdout: 0.0,
            seed: 0,
            out_dir: "out".into(),
        }
    }
}

impl<R: Real> RunConfig<R> {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.d_x == 0 || self.d_y == 0 {
            return Err(PipelineError::Config("d_x and d_y must be positive".into()));
        }
        if !(self.alpha > R::zero() && self.alpha < R::one()) {
            return Err(PipelineError::Config("alpha must lie in (0,1)".into()));
        }
        if self.k == 0 || self.window == 0 {
            return Err(PipelineError::Config(
                "window lengths must be positive".into(),
            ));
        }
        if self.flow.gamma <= R::zero() {
            return Err(PipelineError::Config("gamma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flow.p_null) {
            return Err(PipelineError::Config("p_null must lie in [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.predictor_holdout) {
            return Err(PipelineError::Config(
                "predictor_holdout must lie in [0,1)".into(),
            ));
        }
        self.encoder.validate().map_err(PipelineError::Config)?;
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        match self.n_policy {
            NPolicy::Fixed { n } if n > 0 => n,
            NPolicy::Fixed { .. } => default_sample_count(self.d_y),
            NPolicy::AutoGate { start, .. } => start,
        }
    }
}

/// Everything `eval` needs, produced by training or loaded from disk.
pub struct TrainedArtifacts<R: Real> {
    pub model: GuidedFlowModel<R>,
    pub ensemble: Ensemble<R>,
    pub standardizer: Standardizer<R>,
    pub k: usize,
    pub window: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub epoch_log: Vec<EpochLog>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Residuals ε̂_i = y_i − ŷ_i for every windowed index (None before burn-in).
pub fn residual_table<R: Real>(
    ds: &SeriesDataset<R>,
    features_std: &Matrix<R>,
    ensemble: &Ensemble<R>,
    k: usize,
) -> Vec<Option<Vec<R>>> {
    let t = ds.len();
    let mut out: Vec<Option<Vec<R>>> = vec![None; t];
    let mut flat = vec![R::zero(); k * ds.d_x()];
    for i in k..t {
        flatten_window(features_std, i, k, &mut flat);
        let y_hat = match &ds.predictions {
            Some(p) => p.row(i).to_vec(),
            None => ensemble.predict(&flat, Some(i - k)),
        };
        let eps: Vec<R> = ds
            .outcomes
            .row(i)
            .iter()
            .zip(&y_hat)
            .map(|(&y, &p)| y - p)
            .collect();
        out[i] = Some(eps);
    }
    out
}

/// Stack rows x_{i−k..i−1} into one flat slice.
fn flatten_window<R: Real>(features: &Matrix<R>, i: usize, k: usize, out: &mut [R]) {
    let d = features.cols();
    for (j, row) in (i - k..i).enumerate() {
        out[j * d..(j + 1) * d].copy_from_slice(features.row(row));
    }
}

/// Encoder context at index i: tokens j = i−w+1..=i carrying the
/// standardized feature and the residual (zero at j = i and wherever
/// history is unavailable).
pub fn context_window<R: Real>(
    features_std: &Matrix<R>,
    residuals: &[Option<Vec<R>>],
    i: usize,
    w: usize,
    d_y: usize,
) -> ContextWindow<R> {
    let d_x = features_std.cols();
    let mut tokens = Matrix::zeros(w, d_x + d_y);
    for (slot, j) in (i as isize - w as isize + 1..=i as isize).enumerate() {
        if j < 0 {
            continue; // zero padding before the series starts
        }
        let j = j as usize;
        let row = tokens.row_mut(slot);
        row[..d_x].copy_from_slice(features_std.row(j));
        if j < i {
            if let Some(eps) = &residuals[j] {
                row[d_x..].copy_from_slice(eps);
            }
        }
    }
    ContextWindow::new(tokens)
}

/// Fit the base predictor and train the guided flow, keeping the checkpoint
/// with the lowest validation flow-matching loss.
pub fn train_run<R: Real>(
    cfg: &RunConfig<R>,
    ds: &SeriesDataset<R>,
    mut progress: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<TrainedArtifacts<R>, PipelineError> {
    cfg.validate()?;
    let holdout;
    let ds = if cfg.predictor_holdout > 0.0 {
        holdout = ds.suffix((cfg.predictor_holdout * ds.len() as f64).floor() as usize);
        &holdout
    } else {
        ds
    };
    let t = ds.len();
    let splits = make_splits(t)?;
    if cfg.k >= splits.train.end {
        return Err(PipelineError::Config(format!(
            "window k = {} leaves no training rows (train split ends at {})",
            cfg.k, splits.train.end
        )));
    }
    let standardizer = Standardizer::fit(&ds.features, splits.train.clone());
    let features_std = standardizer.apply(&ds.features);

    // LOO bootstrap over every windowed index (the linear ensemble uses the
    // full sequence; out-of-bag members provide leave-one-out predictions)
    let mut pred_rng = StdRng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n_windows = t - cfg.k;
    let mut x = Matrix::zeros(n_windows, cfg.k * ds.d_x());
    let mut y = Matrix::zeros(n_windows, ds.d_y());
    for i in cfg.k..t {
        let r = i - cfg.k;
        let mut flat = vec![R::zero(); cfg.k * ds.d_x()];
        flatten_window(&features_std, i, cfg.k, &mut flat);
        x.row_mut(r).copy_from_slice(&flat);
        y.row_mut(r).copy_from_slice(ds.outcomes.row(i));
    }
    let ensemble = fit_loo_bootstrap(&mut pred_rng, &x, &y, cfg.ensemble_size)?;
    let residuals = residual_table(ds, &features_std, &ensemble, cfg.k);

    // training and validation items
    let token_dim = ds.d_x() + ds.d_y();
    let train_items: Vec<(ContextWindow<R>, Vec<R>)> = (cfg.k..splits.train.end)
        .map(|i| {
            (
                context_window(&features_std, &residuals, i, cfg.window, ds.d_y()),
                residuals[i].clone().expect("residual exists past burn-in"),
            )
        })
        .collect();
    if train_items.is_empty() {
        return Err(PipelineError::Config("no training windows".into()));
    }

    let mut val_rng = StdRng::seed_from_u64(cfg.seed ^ 0x243f_6a88_85a3_08d3);
    let gamma_sqrt = cfg.flow.gamma.sqrt();
    // several fixed draws per item keep the selection signal well above its
    // Monte Carlo noise floor
    let draws_per_item = 8;
    let val_items: Vec<ValidationItem<R>> = splits
        .validation
        .clone()
        .map(|i| {
            let window = context_window(&features_std, &residuals, i, cfg.window, ds.d_y());
            let eps_hat = residuals[i].clone().expect("validation residual");
            let draws = (0..draws_per_item)
                .map(|_| {
                    let x0: Vec<R> = (0..ds.d_y())
                        .map(|_| standard_normal::<R>(&mut val_rng) * gamma_sqrt)
                        .collect();
                    let tt = R::of(val_rng.random::<f64>());
                    (x0, tt)
                })
                .collect();
            ValidationItem { window, eps_hat, draws }
        })
        .collect();

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut model = GuidedFlowModel::new(ds.d_y(), token_dim, cfg.flow, cfg.encoder, &mut rng);
    let mut opt = AdamState::new(model.store());

    let mut best_store = model.store().clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epoch_log = Vec::new();
    let mut order: Vec<usize> = (0..train_items.len()).collect();

    for epoch in 1..=cfg.flow.max_epochs {
        // Fisher–Yates shuffle on the shared stream
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = R::zero();
        let mut batches = 0usize;
        let mut batch: Vec<(ContextWindow<R>, Vec<R>)> = Vec::with_capacity(cfg.flow.batch_size);
        for &idx in &order {
            batch.push(train_items[idx].clone());
            if batch.len() == cfg.flow.batch_size {
                epoch_loss = epoch_loss + train_step(&mut model, &mut opt, &mut rng, &batch)?;
                batches += 1;
                batch.clear();
            }
        }
        if !batch.is_empty() {
            epoch_loss = epoch_loss + train_step(&mut model, &mut opt, &mut rng, &batch)?;
            batches += 1;
        }
        let train_loss = (epoch_loss / R::of_usize(batches.max(1))).f64();
        let val_loss = if val_items.is_empty() {
            train_loss
        } else {
            matching_loss(&model, &val_items).f64()
        };
        let log = EpochLog {
            epoch,
            train_loss,
            val_loss,
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&log);
        }
        epoch_log.push(log);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_store = model.store().clone();
        }
    }
    if cfg.flow.max_epochs > 0 {
        *model.store_mut() = best_store;
    }

    Ok(TrainedArtifacts {
        model,
        ensemble,
        standardizer,
        k: cfg.k,
        window: cfg.window,
        seed: cfg.seed,
        best_epoch,
        epoch_log,
    })
}

/// Machine-readable evaluation output (no timestamps, fully reproducible).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(bound = "")]
pub struct RunReport<R: Real> {
    pub alpha: R,
    pub guidance_scale: R,
    pub n_samples: usize,
    pub radius: R,
    pub n_test: usize,
    pub empirical_coverage: R,
    pub average_size: R,
    pub size_std: R,
    pub rolling_coverage: Vec<R>,
    pub per_index: Vec<PerIndexRow<R>>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(bound = "")]
pub struct PerIndexRow<R: Real> {
    pub index: usize,
    pub score: R,
    pub covered: bool,
    pub size: R,
}

/// Sequential one-step-ahead evaluation over the test split: guidance from
/// history only (residual at the evaluated index is never read), membership
/// from the inverse-flow score, size from the QMC estimator.
pub fn eval_run<R: Real>(
    cfg: &RunConfig<R>,
    ds: &SeriesDataset<R>,
    art: &TrainedArtifacts<R>,
) -> Result<RunReport<R>, PipelineError> {
    cfg.validate()?;
    let holdout;
    let ds = if cfg.predictor_holdout > 0.0 {
        holdout = ds.suffix((cfg.predictor_holdout * ds.len() as f64).floor() as usize);
        &holdout
    } else {
        ds
    };
    let splits = make_splits(ds.len())?;
    let features_std = art.standardizer.apply(&ds.features);
    let residuals = residual_table(ds, &features_std, &art.ensemble, art.k);
    let d_y = ds.d_y();
    let w = cfg.flow.guidance_scale;
    let radius = Radius::new(cfg.alpha, d_y, art.model.config().gamma)?;

    let test: Vec<usize> = splits.test.clone().filter(|&i| i >= art.k).collect();
    if test.is_empty() {
        return Err(PipelineError::Config("empty test split".into()));
    }

    // guidances first; the sample-count gate may need them
    let guidances: Vec<Vec<R>> = test
        .iter()
        .map(|&i| {
            art.model
                .encode(&context_window(
                    &features_std,
                    &residuals,
                    i,
                    art.window,
                    d_y,
                ))
                .h
        })
        .collect();

    let n_samples = match cfg.n_policy {
        NPolicy::Fixed { n } => {
            if n > 0 {
                n
            } else {
                default_sample_count(d_y)
            }
        }
        NPolicy::AutoGate { start, gate, max } => select_n_over_guidances(
            &art.model, &guidances, cfg.alpha, w, &cfg.ode, start, gate, max,
        )?,
    };

    let mut per_index = Vec::with_capacity(test.len());
    let mut covered_flags = Vec::with_capacity(test.len());
    let mut sizes = Vec::with_capacity(test.len());
    let mut flat = vec![R::zero(); art.k * ds.d_x()];
    for (pos, &i) in test.iter().enumerate() {
        let h = &guidances[pos];
        flatten_window(&features_std, i, art.k, &mut flat);
        let y_hat = match &ds.predictions {
            Some(p) => p.row(i).to_vec(),
            None => art.ensemble.predict(&flat, Some(i - art.k)),
        };
        let score =
            crate::conformal::score(&art.model, ds.outcomes.row(i), &y_hat, h, w, &cfg.ode)?;
        let covered = score <= radius.value;
        let size = set_size(&art.model, h, cfg.alpha, n_samples, w, &cfg.ode)?;
        per_index.push(PerIndexRow {
            index: i,
            score,
            covered,
            size,
        });
        covered_flags.push(covered);
        sizes.push(size);
    }

    let n = R::of_usize(sizes.len());
    let avg = sizes.iter().fold(R::zero(), |a, &v| a + v) / n;
    let std = if sizes.len() > 1 {
        (sizes
            .iter()
            .fold(R::zero(), |a, &v| a + (v - avg) * (v - avg))
            / (n - R::one()))
        .sqrt()
    } else {
        R::zero()
    };
    let rolling = if covered_flags.len() >= DEFAULT_ROLLING_WINDOW {
        rolling_coverage(&covered_flags, DEFAULT_ROLLING_WINDOW)?
    } else {
        Vec::new()
    };
    Ok(RunReport {
        alpha: cfg.alpha,
        guidance_scale: w,
        n_samples,
        radius: radius.value,
        n_test: test.len(),
        empirical_coverage: crate::eval::empirical_coverage(&covered_flags)?,
        average_size: avg,
        size_std: std,
        rolling_coverage: rolling,
        per_index,
    })
}

/// Global N for the run: double from `start` until the average relative SE
/// of the Jacobian determinants across sampled guidances drops below the
/// gate.
#[allow(clippy::too_many_arguments)]
fn select_n_over_guidances<R: Real>(
    model: &GuidedFlowModel<R>,
    guidances: &[Vec<R>],
    alpha: R,
    w: R,
    ode: &OdeConfig<R>,
    start: usize,
    gate: f64,
    max: usize,
) -> Result<usize, PipelineError> {
    let sample: Vec<&Vec<R>> = guidances
        .iter()
        .step_by((guidances.len() / 4).max(1))
        .take(4)
        .collect();
    let d = model.d_y();
    let radius = Radius::new(alpha, d, model.config().gamma)?;
    let mut n = start.max(2);
    loop {
        let mut avg_se = 0.0;
        for h in &sample {
            let points =
                crate::conformal::ball_points(d, radius.value, n).map_err(ConformalError::from)?;
            let (_, logdets) = crate::flow::flow_forward_logdet_batch(model, &points, h, w, ode)?;
            let dets: Vec<R> = logdets.iter().map(|&ld| ld.exp()).collect();
            avg_se += relative_se(&dets).map_err(ConformalError::from)?.f64();
        }
        avg_se /= sample.len() as f64;
        if avg_se < gate {
            return Ok(n);
        }
        if n >= max {
            return Err(PipelineError::Conformal(ConformalError::Qmc(
                crate::qmc::QmcError::GateUnreachable { gate, max },
            )));
        }
        n = (n * 2).min(max);
    }
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"FCPCKPT\x01";

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(bound = "")]
struct CheckpointMeta<R: Real> {
    spec: ModelSpec<R>,
    seed: u64,
    k: usize,
    window: usize,
    best_epoch: usize,
    epoch_log: Vec<EpochLog>,
    standardizer_mean: Vec<R>,
    standardizer_std: Vec<R>,
    bootstrap_masks: Vec<Vec<bool>>,
}

/// Bundle the flow parameters, predictor and preprocessing into one file.
pub fn save_checkpoint<R: Real>(
    path: impl AsRef<Path>,
    art: &TrainedArtifacts<R>,
) -> Result<(), PipelineError> {
    let meta = CheckpointMeta {
        spec: art.model.spec(),
        seed: art.seed,
        k: art.k,
        window: art.window,
        best_epoch: art.best_epoch,
        epoch_log: art.epoch_log.clone(),
        standardizer_mean: art.standardizer.mean.clone(),
        standardizer_std: art.standardizer.std.clone(),
        bootstrap_masks: art.ensemble.contains.clone(),
    };
    let json =
        serde_json::to_vec(&meta).map_err(|e| PipelineError::BadCheckpoint(e.to_string()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    art.model.store().write_to(&mut f)?;
    let mut pred_store: ParamStore<R> = ParamStore::new();
    for (b, m) in art.ensemble.models.iter().enumerate() {
        pred_store.insert(format!("m{b}.w"), m.weights.clone());
    }
    pred_store.write_to(&mut f)?;
    Ok(())
}

pub fn load_checkpoint<R: Real>(
    path: impl AsRef<Path>,
) -> Result<TrainedArtifacts<R>, PipelineError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(PipelineError::BadCheckpoint("bad magic header".into()));
    }
    let mut len_buf = [0u8; 8];
    f.read_exact(&mut len_buf)?;
    let json_len = u64::from_le_bytes(len_buf) as usize;
    let mut json = vec![0u8; json_len];
    f.read_exact(&mut json)?;
    let meta: CheckpointMeta<R> =
        serde_json::from_slice(&json).map_err(|e| PipelineError::BadCheckpoint(e.to_string()))?;
    let flow_store = ParamStore::read_from(&mut f)?;
    let pred_store: ParamStore<R> = ParamStore::read_from(&mut f)?;

    let model = GuidedFlowModel::from_parts(&meta.spec, flow_store);
    let mut models = Vec::with_capacity(meta.bootstrap_masks.len());
    for b in 0..meta.bootstrap_masks.len() {
        let w = pred_store
            .get(&format!("m{b}.w"))
            .ok_or_else(|| PipelineError::BadCheckpoint(format!("missing predictor member {b}")))?
            .clone();
        models.push(LinearModel { weights: w });
    }
    Ok(TrainedArtifacts {
        model,
        ensemble: Ensemble {
            models,
            contains: meta.bootstrap_masks,
        },
        standardizer: Standardizer {
            mean: meta.standardizer_mean,
            std: meta.standardizer_std,
        },
        k: meta.k,
        window: meta.window,
        seed: meta.seed,
        best_epoch: meta.best_epoch,
        epoch_log: meta.epoch_log,
    })
}

/// Write `report.json` and `per_index.csv` under `dir`.
pub fn write_report<R: Real>(
    dir: impl AsRef<Path>,
    report: &RunReport<R>,
) -> Result<(), PipelineError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_vec_pretty(report)
        .map_err(|e| PipelineError::BadCheckpoint(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json)?;
    let mut csv = String::from("index,score,radius,covered,size\n");
    for row in &report.per_index {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.index, row.score, report.radius, row.covered, row.size
        ));
    }
    std::fs::write(dir.join("per_index.csv"), csv)?;
    Ok(())
}

/// Write the per-epoch loss log as CSV.
pub fn write_loss_log(dir: impl AsRef<Path>, log: &[EpochLog]) -> Result<(), PipelineError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for e in log {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
    }
    std::fs::write(dir.join("loss_log.csv"), csv)?;
    Ok(())
}

/// Boundary of the 2-D prediction set at one test index, as (x, y) rows.
pub fn region_for_index<R: Real>(
    cfg: &RunConfig<R>,
    ds: &SeriesDataset<R>,
    art: &TrainedArtifacts<R>,
    index: usize,
    k_points: usize,
) -> Result<Vec<[R; 2]>, PipelineError> {
    let holdout;
    let ds = if cfg.predictor_holdout > 0.0 {
        holdout = ds.suffix((cfg.predictor_holdout * ds.len() as f64).floor() as usize);
        &holdout
    } else {
        ds
    };
    let splits = make_splits(ds.len())?;
    if !splits.test.contains(&index) || index < art.k {
        return Err(PipelineError::IndexOutOfRange {
            index,
            start: splits.test.start.max(art.k),
            end: splits.test.end,
        });
    }
    let features_std = art.standardizer.apply(&ds.features);
    let residuals = residual_table(ds, &features_std, &art.ensemble, art.k);
    let h = art
        .model
        .encode(&context_window(
            &features_std,
            &residuals,
            index,
            art.window,
            ds.d_y(),
        ))
        .h;
    let mut flat = vec![R::zero(); art.k * ds.d_x()];
    flatten_window(&features_std, index, art.k, &mut flat);
    let y_hat = match &ds.predictions {
        Some(p) => p.row(index).to_vec(),
        None => art.ensemble.predict(&flat, Some(index - art.k)),
    };
    Ok(crate::conformal::region_boundary_2d(
        &art.model,
        &h,
        &y_hat,
        cfg.alpha,
        k_points,
        cfg.flow.guidance_scale,
        &cfg.ode,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_var, NoiseSpec};

    fn small_cfg() -> RunConfig<f64> {
        RunConfig {
            d_x: 2,
            d_y: 2,
            alpha: 0.1,
            k: 10,
            window: 10,
            flow: FlowConfig {
                vf_layers: 1,
                vf_hidden: 8,
                batch_size: 16,
                max_epochs: 2,
                ..FlowConfig::default()
            },
            encoder: EncoderConfig {
                layers: 1,
                heads: 2,
                model_dim: 8,
                dropout: 0.1,
            },
            n_policy: NPolicy::Fixed { n: 16 },
            seed: 7,
            ..RunConfig::default()
        }
    }

    fn small_ds() -> SeriesDataset<f64> {
        synth_var(
            3,
            220,
            2,
            0.7,
            NoiseSpec::StateScaled {
                base: 0.3,
                amp: 0.7,
            },
        )
        .unwrap()
    }

    #[test]
    fn train_eval_round_trip_through_checkpoint() {
        let cfg = small_cfg();
        let ds = small_ds();
        let art = train_run(&cfg, &ds, None).unwrap();
        assert_eq!(art.epoch_log.len(), 2);
        assert!(art.best_epoch >= 1);

        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("model.fcp");
        save_checkpoint(&ckpt, &art).unwrap();
        let loaded = load_checkpoint::<f64>(&ckpt).unwrap();

        let a = eval_run(&cfg, &ds, &art).unwrap();
        let b = eval_run(&cfg, &ds, &loaded).unwrap();
        assert_eq!(a.empirical_coverage, b.empirical_coverage);
        assert_eq!(a.average_size, b.average_size);
        assert_eq!(a.per_index.len(), b.per_index.len());
        for (ra, rb) in a.per_index.iter().zip(&b.per_index) {
            assert_eq!(ra.score.to_bits(), rb.score.to_bits());
            assert_eq!(ra.size.to_bits(), rb.size.to_bits());
        }
    }

    #[test]
    fn reports_serialize_deterministically() {
        let cfg = small_cfg();
        let ds = small_ds();
        let art = train_run(&cfg, &ds, None).unwrap();
        let rep = eval_run(&cfg, &ds, &art).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_report(d1.path(), &rep).unwrap();
        write_report(d2.path(), &rep).unwrap();
        let a = std::fs::read(d1.path().join("report.json")).unwrap();
        let b = std::fs::read(d2.path().join("report.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guidance_ignores_residual_at_current_index() {
        // the residual slot of the final token must be zero no matter what
        // the residual table holds at i
        let ds = small_ds();
        let features = ds.features.clone();
        let mut residuals: Vec<Option<Vec<f64>>> = vec![None; ds.len()];
        for i in 5..ds.len() {
            residuals[i] = Some(vec![99.0, -99.0]);
        }
        let w = context_window(&features, &residuals, 50, 8, 2);
        let tokens = w.tokens();
        let last = tokens.row(7);
        assert_eq!(
            &last[2..],
            &[0.0, 0.0],
            "current-index residual leaked into guidance"
        );
        let prev = tokens.row(6);
        assert_eq!(&prev[2..], &[99.0, -99.0]);
    }

    #[test]
    fn region_rejects_out_of_test_indices() {
        let cfg = small_cfg();
        let ds = small_ds();
        let art = train_run(&cfg, &ds, None).unwrap();
        let err = region_for_index(&cfg, &ds, &art, 0, 8).unwrap_err();
        assert!(matches!(err, PipelineError::IndexOutOfRange { .. }));
        let splits = make_splits(ds.len()).unwrap();
        let pts = region_for_index(&cfg, &ds, &art, splits.test.start, 8).unwrap();
        assert_eq!(pts.len(), 8);
    }

    #[test]
    fn auto_gate_selects_start_for_constant_determinants() {
        // zero the vector field: every Jacobian determinant is exactly one,
        // so the relative SE is zero and the gate accepts the starting N
        let mut cfg = small_cfg();
        cfg.n_policy = NPolicy::AutoGate {
            start: 8,
            gate: 0.01,
            max: 1 << 12,
        };
        let ds = small_ds();
        let mut art = train_run(&cfg, &ds, None).unwrap();
        let names: Vec<String> = art
            .model
            .store()
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with("vf."))
            .collect();
        for n in names {
            let (r, c) = art.model.store().get(&n).unwrap().shape();
            art.model
                .store_mut()
                .set(&n, crate::diffmath::Matrix::zeros(r, c));
        }
        let rep = eval_run(&cfg, &ds, &art).unwrap();
        assert_eq!(rep.n_samples, 8);
    }

    #[test]
    fn predictor_holdout_shrinks_the_evaluation_span() {
        let mut cfg = small_cfg();
        cfg.predictor_holdout = 0.5;
        let ds = synth_var::<f64>(3, 440, 2, 0.7, NoiseSpec::Isotropic { sigma: 0.4 }).unwrap();
        let art = train_run(&cfg, &ds, None).unwrap();
        let rep = eval_run(&cfg, &ds, &art).unwrap();
        // evaluation sequence = last 220 rows; its test split is the final 10%
        assert_eq!(rep.n_test, 22);
        let full = small_cfg();
        let art_full = train_run(&full, &ds, None).unwrap();
        let rep_full = eval_run(&full, &ds, &art_full).unwrap();
        assert_eq!(rep_full.n_test, 44);
    }

    #[test]
    fn precomputed_predictions_bypass_the_ensemble() {
        let cfg = small_cfg();
        let mut ds = small_ds();
        // supply ŷ columns equal to the clean signal: residuals become the
        // recorded true noise
        let t = ds.len();
        let clean: Vec<f64> = (0..t * 2)
            .map(|idx| ds.outcomes.data()[idx] - ds.true_noise.as_ref().unwrap().data()[idx])
            .collect();
        ds.predictions = Some(Matrix::from_vec(t, 2, clean));
        let art = train_run(&cfg, &ds, None).unwrap();
        let features_std = art.standardizer.apply(&ds.features);
        let residuals = residual_table(&ds, &features_std, &art.ensemble, art.k);
        let noise = ds.true_noise.as_ref().unwrap();
        for i in art.k..t {
            let eps = residuals[i].as_ref().unwrap();
            for c in 0..2 {
                assert!((eps[c] - noise.at(i, c)).abs() < 1e-12);
            }
        }
    }
}
