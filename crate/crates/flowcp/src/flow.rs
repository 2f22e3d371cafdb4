//! The guided flow: Gaussian probability path, flow-matching training with
//! classifier-free guidance, the CFG velocity combination, and the forward,
//! inverse and log-det-augmented transport maps.

use rand::RngExt;

use crate::diffmath::{adam_step, AdamState, Gradients, Matrix, Mlp, ParamStore, Tape};
use crate::encoder::{null_guidance, ContextWindow, Encoder, EncoderConfig, Guidance};
use crate::ode::{integrate, OdeConfig, OdeError};
use crate::scalar::Real;

#[derive(Debug, Clone, thiserror::Error)]
pub enum FlowError {
    #[error("training batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// Interpolating scheduler of the Gaussian path: α(t) = t, σ(t) = 1 − t.
#[derive(Debug, Clone, Copy, Default)]
pub struct PathScheduler;

impl PathScheduler {
    pub fn alpha<R: Real>(&self, t: R) -> R {
        t
    }

    pub fn sigma<R: Real>(&self, t: R) -> R {
        R::one() - t
    }

    pub fn d_alpha<R: Real>(&self, _t: R) -> R {
        R::one()
    }

    pub fn d_sigma<R: Real>(&self, _t: R) -> R {
        -R::one()
    }
}

/// Path sample x_t = α_t ε̂ + σ_t x₀.
pub fn sample_path_point<R: Real>(eps_hat: &[R], x0: &[R], t: R) -> Vec<R> {
    assert_eq!(eps_hat.len(), x0.len(), "dimension mismatch");
    let sched = PathScheduler;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    eps_hat
        .iter()
        .zip(x0)
        .map(|(&e, &x)| a * e + s * x)
        .collect()
}

/// Conditional target velocity α̇_t ε̂ + σ̇_t x₀ = ε̂ − x₀ (t-independent
/// under this scheduler).
pub fn target_velocity<R: Real>(eps_hat: &[R], x0: &[R]) -> Vec<R> {
    assert_eq!(eps_hat.len(), x0.len(), "dimension mismatch");
    eps_hat.iter().zip(x0).map(|(&e, &x)| e - x).collect()
}

/// Training and guidance hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(bound = "")]
pub struct FlowConfig<R: Real> {
    /// Source covariance scale γ of N(0, γI).
    pub gamma: R,
    /// Probability of substituting the null guidance during training.
    pub p_null: f64,
    /// Guidance scale w applied at inference.
    pub guidance_scale: R,
    /// Hidden layers of the vector field.
    pub vf_layers: usize,
    /// Hidden width of the vector field.
    pub vf_hidden: usize,
    pub learning_rate: R,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Global gradient-norm clip.
    pub grad_clip: R,
}

impl<R: Real> Default for FlowConfig<R> {
    fn default() -> Self {
        FlowConfig {
            gamma: R::one(),
            p_null: 0.05,
            guidance_scale: R::of(1.1),
            vf_layers: 4,
            vf_hidden: 32,
            learning_rate: R::of(5e-4),
            batch_size: 8,
            max_epochs: 50,
            grad_clip: R::of(10.0),
        }
    }
}

/// Architecture header serialized next to the parameters in checkpoints.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(bound = "")]
pub struct ModelSpec<R: Real> {
    pub d_y: usize,
    pub token_dim: usize,
    pub flow: FlowConfig<R>,
    pub encoder: EncoderConfig,
}

/// Guided vector field u(t, x | h) plus its encoder, over one parameter
/// store (which also holds the learned h_∅).
#[derive(Debug, Clone)]
pub struct GuidedFlowModel<R: Real> {
    d_y: usize,
    vf: Mlp,
    encoder: Encoder,
    store: ParamStore<R>,
    cfg: FlowConfig<R>,
}

impl<R: Real> GuidedFlowModel<R> {
    /// Fresh model with randomly initialized parameters.
    pub fn new(
        d_y: usize,
        token_dim: usize,
        cfg: FlowConfig<R>,
        enc_cfg: EncoderConfig,
        rng: &mut impl RngExt,
    ) -> Self {
        let encoder = Encoder::new(enc_cfg, token_dim);
        let d_h = encoder.output_dim();
        let vf = Mlp::new("vf", d_y + d_h + 1, cfg.vf_hidden, cfg.vf_layers, d_y);
        let mut store = ParamStore::new();
        vf.init_params(&mut store, rng);
        encoder.init_params(&mut store, rng);
        GuidedFlowModel {
            d_y,
            vf,
            encoder,
            store,
            cfg,
        }
    }

    /// Rebuild a model around an existing parameter store (checkpoint load).
    pub fn from_parts(spec: &ModelSpec<R>, store: ParamStore<R>) -> Self {
        let encoder = Encoder::new(spec.encoder, spec.token_dim);
        let d_h = encoder.output_dim();
        let vf = Mlp::new(
            "vf",
            spec.d_y + d_h + 1,
            spec.flow.vf_hidden,
            spec.flow.vf_layers,
            spec.d_y,
        );
        GuidedFlowModel {
            d_y: spec.d_y,
            vf,
            encoder,
            store,
            cfg: spec.flow,
        }
    }

    pub fn spec(&self) -> ModelSpec<R> {
        ModelSpec {
            d_y: self.d_y,
            token_dim: self.encoder.token_dim(),
            flow: self.cfg,
            encoder: *self.encoder.config(),
        }
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    pub fn guidance_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn store(&self) -> &ParamStore<R> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.store
    }

    pub fn config(&self) -> &FlowConfig<R> {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut FlowConfig<R> {
        &mut self.cfg
    }

    pub fn encode(&self, window: &ContextWindow<R>) -> Guidance<R> {
        self.encoder.encode(&self.store, window)
    }

    pub fn null_guidance(&self) -> Guidance<R> {
        null_guidance(&self.store)
    }

    /// Stack `[x | h | t]` rows for a batch of states sharing one guidance.
    fn vf_input(&self, t: R, xs: &Matrix<R>, h: &[R]) -> Matrix<R> {
        assert_eq!(xs.cols(), self.d_y, "state width mismatch");
        assert_eq!(h.len(), self.guidance_dim(), "guidance width mismatch");
        let n = xs.rows();
        let width = self.d_y + h.len() + 1;
        let mut input = Matrix::zeros(n, width);
        for r in 0..n {
            let row = input.row_mut(r);
            row[..self.d_y].copy_from_slice(xs.row(r));
            row[self.d_y..self.d_y + h.len()].copy_from_slice(h);
            row[width - 1] = t;
        }
        input
    }

    /// Raw field evaluation under a single guidance, one row per state.
    pub fn velocity_batch(&self, t: R, xs: &Matrix<R>, h: &[R]) -> Matrix<R> {
        self.vf.eval_batch(&self.store, &self.vf_input(t, xs, h))
    }

    pub fn velocity(&self, t: R, x: &[R], h: &[R]) -> Vec<R> {
        self.velocity_batch(t, &Matrix::row_vector(x.to_vec()), h)
            .into_data()
    }

    /// CFG-combined velocity using the stored h_∅ and guidance scale `w`.
    /// `w = 1` evaluates only the guided branch.
    pub fn guided_velocity_batch(&self, t: R, xs: &Matrix<R>, h: &[R], w: R) -> Matrix<R> {
        if w == R::one() {
            return self.velocity_batch(t, xs, h);
        }
        let h_null = self.null_guidance().h;
        let un = self.velocity_batch(t, xs, &h_null);
        let gu = self.velocity_batch(t, xs, h);
        let mut out = gu;
        for (o, &u) in out.data_mut().iter_mut().zip(un.data()) {
            *o = (R::one() - w) * u + w * *o;
        }
        out
    }

    /// Divergence of the CFG-combined field with respect to x, per row:
    /// (1−w)·tr J(x|h_∅) + w·tr J(x|h) by linearity of the trace.
    pub fn guided_divergence_batch(&self, t: R, xs: &Matrix<R>, h: &[R], w: R) -> Vec<R> {
        if w == R::one() {
            return self.divergence_batch(t, xs, h);
        }
        let h_null = self.null_guidance().h;
        let dn = self.divergence_batch(t, xs, &h_null);
        let dg = self.divergence_batch(t, xs, h);
        dn.iter()
            .zip(&dg)
            .map(|(&a, &b)| (R::one() - w) * a + w * b)
            .collect()
    }

    /// tr ∂u/∂x under a single guidance, via d_y reverse passes over one
    /// batched tape (rows do not interact inside the MLP).
    fn divergence_batch(&self, t: R, xs: &Matrix<R>, h: &[R]) -> Vec<R> {
        let n = xs.rows();
        let mut tape = Tape::new(&self.store);
        let input = tape.input(self.vf_input(t, xs, h));
        let out = self.vf.forward_tape(&mut tape, input);
        let mut div = vec![R::zero(); n];
        for k in 0..self.d_y {
            let mut seed = Matrix::zeros(n, self.d_y);
            for r in 0..n {
                seed.set(r, k, R::one());
            }
            let adj = tape.backward_from(out, seed);
            let dx = adj.of(input).expect("input reaches the output");
            for (r, d) in div.iter_mut().enumerate() {
                *d = *d + dx.at(r, k);
            }
        }
        div
    }
}

/// CFG combination (1−w)·u(t, x | h_∅) + w·u(t, x | h) with explicit
/// guidances; `w = 1` evaluates only the guided branch.
pub fn cfg_velocity<R: Real>(
    model: &GuidedFlowModel<R>,
    t: R,
    x: &[R],
    h: &Guidance<R>,
    h_null: &Guidance<R>,
    w: R,
) -> Vec<R> {
    if w == R::one() {
        return model.velocity(t, x, &h.h);
    }
    let un = model.velocity(t, x, &h_null.h);
    let gu = model.velocity(t, x, &h.h);
    un.iter()
        .zip(&gu)
        .map(|(&u, &g)| (R::one() - w) * u + w * g)
        .collect()
}

/// ψ_{1|h}(x₀ | h): integrate the guided ODE from t = 0 to 1.
pub fn flow_forward<R: Real>(
    model: &GuidedFlowModel<R>,
    x0: &[R],
    h: &[R],
    w: R,
    ode_cfg: &OdeConfig<R>,
) -> Result<Vec<R>, FlowError> {
    let xs = Matrix::row_vector(x0.to_vec());
    Ok(flow_forward_batch(model, &xs, h, w, ode_cfg)?.into_data())
}

/// ψ⁻¹_{1|h}(ε | h): integrate from t = 1 back to 0.
pub fn flow_inverse<R: Real>(
    model: &GuidedFlowModel<R>,
    eps: &[R],
    h: &[R],
    w: R,
    ode_cfg: &OdeConfig<R>,
) -> Result<Vec<R>, FlowError> {
    let xs = Matrix::row_vector(eps.to_vec());
    Ok(flow_inverse_batch(model, &xs, h, w, ode_cfg)?.into_data())
}

/// Batched forward transport: one ODE solve over all rows.
pub fn flow_forward_batch<R: Real>(
    model: &GuidedFlowModel<R>,
    x0s: &Matrix<R>,
    h: &[R],
    w: R,
    ode_cfg: &OdeConfig<R>,
) -> Result<Matrix<R>, FlowError> {
    transport_batch(model, x0s, h, w, ode_cfg, R::zero(), R::one())
}

/// Batched inverse transport.
pub fn flow_inverse_batch<R: Real>(
    model: &GuidedFlowModel<R>,
    eps: &Matrix<R>,
    h: &[R],
    w: R,
    ode_cfg: &OdeConfig<R>,
) -> Result<Matrix<R>, FlowError> {
    transport_batch(model, eps, h, w, ode_cfg, R::one(), R::zero())
}

fn transport_batch<R: Real>(
    model: &GuidedFlowModel<R>,
    xs: &Matrix<R>,
    h: &[R],
    w: R,
    ode_cfg: &OdeConfig<R>,
    t0: R,
    t1: R,
) -> Result<Matrix<R>, FlowError> {
    let (n, d) = xs.shape();
    let end = integrate(
        |t, state: &[R]| {
            let m = Matrix::from_vec(n, d, state.to_vec());
            model.guided_velocity_batch(t, &m, h, w).into_data()
        },
        xs.data(),
        t0,
        t1,
        ode_cfg,
    )?;
    Ok(Matrix::from_vec(n, d, end))
}

/// Forward transport with log|det J| accumulation (one divergence-augmented
/// solve per batch; the log-determinant starts at zero).
pub fn flow_forward_logdet_batch<R: Real>(
    model: &GuidedFlowModel<R>,
    x0s: &Matrix<R>,
    h: &[R],
    w: R,
    ode_cfg: &OdeConfig<R>,
) -> Result<(Matrix<R>, Vec<R>), FlowError> {
    let (n, d) = x0s.shape();
    let mut init = x0s.data().to_vec();
    init.extend(std::iter::repeat(R::zero()).take(n));
    let end = integrate(
        |t, state: &[R]| {
            let m = Matrix::from_vec(n, d, state[..n * d].to_vec());
            let mut rhs = model.guided_velocity_batch(t, &m, h, w).into_data();
            rhs.extend(model.guided_divergence_batch(t, &m, h, w));
            rhs
        },
        &init,
        R::zero(),
        R::one(),
        ode_cfg,
    )?;
    let states = Matrix::from_vec(n, d, end[..n * d].to_vec());
    let logdets = end[n * d..].to_vec();
    Ok((states, logdets))
}

pub fn flow_forward_logdet<R: Real>(
    model: &GuidedFlowModel<R>,
    x0: &[R],
    h: &[R],
    w: R,
    ode_cfg: &OdeConfig<R>,
) -> Result<(Vec<R>, R), FlowError> {
    let xs = Matrix::row_vector(x0.to_vec());
    let (m, ld) = flow_forward_logdet_batch(model, &xs, h, w, ode_cfg)?;
    Ok((m.into_data(), ld[0]))
}

/// Standard normal draw (Box–Muller over the shared uniform stream, so runs
/// stay reproducible across dependency versions).
pub fn standard_normal<R: Real>(rng: &mut impl RngExt) -> R {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    R::of((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
}

/// One flow-matching step over a batch of (window, residual) pairs:
/// encode (or substitute h_∅ with probability p_∅), draw x₀ ~ N(0, γI) and
/// t ~ U(0,1), regress the field on ε̂ − x₀, and apply one joint Adam update
/// to the field, the encoder and h_∅. Returns the mean batch loss.
pub fn train_step<R: Real>(
    model: &mut GuidedFlowModel<R>,
    opt: &mut AdamState<R>,
    rng: &mut impl RngExt,
    batch: &[(ContextWindow<R>, Vec<R>)],
) -> Result<R, FlowError> {
    if batch.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    let cfg = *model.config();
    let d_y = model.d_y();
    let b = R::of_usize(batch.len());
    let mut grads = Gradients::zeros_like(&model.store);
    let mut total_loss = R::zero();

    for (window, eps_hat) in batch {
        assert_eq!(eps_hat.len(), d_y, "residual width mismatch");
        let use_null = rng.random::<f64>() < cfg.p_null;
        let mut tape = Tape::new(&model.store);
        let h_node = if use_null {
            tape.param(crate::encoder::NULL_GUIDANCE_NAME)
        } else {
            let mut draw = || rng.random::<f64>();
            model
                .encoder
                .forward_tape(&mut tape, window, Some(&mut draw))
        };

        let gamma_sqrt = cfg.gamma.sqrt();
        let x0: Vec<R> = (0..d_y)
            .map(|_| standard_normal::<R>(rng) * gamma_sqrt)
            .collect();
        let t = R::of(rng.random::<f64>());
        let x_t = sample_path_point(eps_hat, &x0, t);
        let target = target_velocity(eps_hat, &x0);

        let x_node = tape.constant(Matrix::row_vector(x_t));
        let t_node = tape.constant(Matrix::row_vector(vec![t]));
        let input = tape.concat_cols(&[x_node, h_node, t_node]);
        let out = model.vf.forward_tape(&mut tape, input);

        let pred = tape.value(out).data();
        let mut seed = Matrix::zeros(1, d_y);
        let two_over_b = R::of(2.0) / b;
        let mut loss = R::zero();
        for k in 0..d_y {
            let r = pred[k] - target[k];
            loss = loss + r * r;
            seed.set(0, k, two_over_b * r);
        }
        total_loss = total_loss + loss;

        let adj = tape.backward_from(out, seed);
        grads.accumulate(&tape.collect_param_grads(&adj));
    }

    grads.clip_global_norm(cfg.grad_clip);
    adam_step(&mut model.store, &grads, opt, cfg.learning_rate);
    Ok(total_loss / b)
}

/// One held-out item with its fixed Monte Carlo draws.
#[derive(Debug, Clone)]
pub struct ValidationItem<R: Real> {
    pub window: ContextWindow<R>,
    pub eps_hat: Vec<R>,
    /// fixed (x0, t) pairs, averaged to cut selection noise
    pub draws: Vec<(Vec<R>, R)>,
}

/// Flow-matching loss under fixed draws (no parameter update, no null
/// substitution); used for validation-based model selection. Each item's
/// guidance is encoded once and its draws are averaged.
pub fn matching_loss<R: Real>(model: &GuidedFlowModel<R>, items: &[ValidationItem<R>]) -> R {
    let mut total = R::zero();
    let mut count = 0usize;
    for item in items {
        let h = model.encode(&item.window);
        for (x0, t) in &item.draws {
            let x_t = sample_path_point(&item.eps_hat, x0, *t);
            let target = target_velocity(&item.eps_hat, x0);
            let v = model.velocity(*t, &x_t, &h.h);
            for k in 0..item.eps_hat.len() {
                let r = v[k] - target[k];
                total = total + r * r;
            }
            count += 1;
        }
    }
    total / R::of_usize(count.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn tiny_model(seed: u64) -> GuidedFlowModel<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let enc = EncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            dropout: 0.0,
        };
        let cfg = FlowConfig {
            vf_layers: 2,
            vf_hidden: 8,
            ..FlowConfig::default()
        };
        GuidedFlowModel::new(2, 4, cfg, enc, &mut rng)
    }

    #[test]
    fn path_point_interpolates_endpoints() {
        let e = [2.0, 0.0];
        let x0 = [0.0, 2.0];
        assert_eq!(sample_path_point(&e, &x0, 0.0), vec![0.0, 2.0]);
        assert_eq!(sample_path_point(&e, &x0, 1.0), vec![2.0, 0.0]);
        assert_eq!(sample_path_point(&e, &x0, 0.5), vec![1.0, 1.0]);
    }

    #[test]
    fn scheduler_identities() {
        let s = PathScheduler;
        for t in [0.0, 0.25, 0.5, 0.99, 1.0] {
            assert_eq!(s.alpha(t) + s.sigma(t), 1.0);
        }
        assert_eq!(s.alpha(0.0), 0.0);
        assert_eq!(s.alpha(1.0), 1.0);
        assert_eq!(s.sigma(0.0), 1.0);
        assert_eq!(s.sigma(1.0), 0.0);
        assert!(s.d_alpha(0.3) - s.d_sigma(0.3) > 0.0);
    }

    #[test]
    fn target_velocity_examples() {
        assert_eq!(target_velocity(&[1.0, 0.0], &[0.0, 1.0]), vec![1.0, -1.0]);
        assert_eq!(target_velocity(&[0.7, -0.2], &[0.7, -0.2]), vec![0.0, 0.0]);
        assert_eq!(target_velocity(&[0.0, 0.0], &[3.0, 4.0]), vec![-3.0, -4.0]);
    }

    #[test]
    fn cfg_weights_interpolate_field_evaluations() {
        let model = tiny_model(3);
        let h = model.encode(&ContextWindow::new(Matrix::from_vec(
            3,
            4,
            (0..12).map(|i| i as f64 * 0.1 - 0.5).collect(),
        )));
        let h0 = model.null_guidance();
        let x = [0.3, -0.6];
        let guided = model.velocity(0.4, &x, &h.h);
        let unguided = model.velocity(0.4, &x, &h0.h);
        let w1 = cfg_velocity(&model, 0.4, &x, &h, &h0, 1.0);
        assert_eq!(w1, guided);
        let w0 = cfg_velocity(&model, 0.4, &x, &h, &h0, 0.0);
        for (a, b) in w0.iter().zip(&unguided) {
            assert!((a - b).abs() < 1e-15);
        }
        let w15 = cfg_velocity(&model, 0.4, &x, &h, &h0, 1.5);
        for k in 0..2 {
            let expect = -0.5 * unguided[k] + 1.5 * guided[k];
            assert!((w15[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn with_unit_scale_outputs_ignore_null_guidance() {
        let mut model = tiny_model(5);
        let h = vec![0.2; 8];
        let cfg = OdeConfig::default();
        let a = flow_forward(&model, &[0.5, -0.3], &h, 1.0, &cfg).unwrap();
        // perturb h_∅ and re-run
        let hn = model.store().get("h_null").unwrap().clone();
        model.store_mut().set("h_null", hn.map(|v| v + 7.5));
        let b = flow_forward(&model, &[0.5, -0.3], &h, 1.0, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits(), "w = 1 must not touch h_∅");
        }
    }

    #[test]
    fn round_trip_recovers_start_points() {
        let model = tiny_model(11);
        let h = vec![0.1; 8];
        let cfg = OdeConfig::default();
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..20 {
            let x0: Vec<f64> = (0..2).map(|_| standard_normal::<f64>(&mut rng)).collect();
            let fwd = flow_forward(&model, &x0, &h, 1.1, &cfg).unwrap();
            let back = flow_inverse(&model, &fwd, &h, 1.1, &cfg).unwrap();
            let err: f64 = x0
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-3, "round-trip error {err}");
        }
    }

    #[test]
    fn batched_transport_matches_single() {
        let model = tiny_model(13);
        let h = vec![-0.2; 8];
        let cfg = OdeConfig::default();
        let pts = Matrix::from_vec(3, 2, vec![0.1, 0.2, -0.4, 0.9, 1.2, -1.0]);
        let batch = flow_forward_batch(&model, &pts, &h, 1.1, &cfg).unwrap();
        for r in 0..3 {
            let single = flow_forward(&model, pts.row(r), &h, 1.1, &cfg).unwrap();
            for c in 0..2 {
                // shared adaptive steps differ from per-point ones
                assert!((batch.at(r, c) - single[c]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn logdet_of_near_zero_field_is_near_zero() {
        let mut model = tiny_model(7);
        // zero all vf parameters: the field vanishes identically
        let names: Vec<String> = model
            .store()
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with("vf."))
            .collect();
        for n in names {
            let (r, c) = model.store().get(&n).unwrap().shape();
            model.store_mut().set(&n, Matrix::zeros(r, c));
        }
        let (end, ld) =
            flow_forward_logdet(&model, &[0.4, -0.2], &[0.0; 8], 1.0, &OdeConfig::default())
                .unwrap();
        assert_eq!(end, vec![0.4, -0.2]);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn training_reduces_loss_on_tiny_dataset() {
        let mut model = tiny_model(23);
        let mut opt = AdamState::new(model.store());
        model.config_mut().learning_rate = 2e-3;
        let mut rng = StdRng::seed_from_u64(29);
        // eight fixed residuals in R², windows of three tokens
        let batch: Vec<(ContextWindow<f64>, Vec<f64>)> = (0..8)
            .map(|i| {
                let tokens = Matrix::from_vec(
                    3,
                    4,
                    (0..12)
                        .map(|j| ((i * 12 + j) as f64 * 0.37).sin())
                        .collect(),
                );
                let eps = vec![(i as f64 * 0.7).sin() * 0.5, (i as f64 * 1.3).cos() * 0.5];
                (ContextWindow::new(tokens), eps)
            })
            .collect();
        let first = train_step(&mut model, &mut opt, &mut rng, &batch).unwrap();
        let mut last = first;
        for _ in 0..499 {
            last = train_step(&mut model, &mut opt, &mut rng, &batch).unwrap();
        }
        assert!(last <= 0.5 * first, "loss {first} -> {last}");
    }

    /// Zero-hidden-layer field: a single linear readout of [x, h, t], which
    /// makes constant and linear velocity fields exactly representable.
    fn linear_field_model(weights: &[(usize, usize, f64)], bias: &[f64]) -> GuidedFlowModel<f64> {
        let mut rng = StdRng::seed_from_u64(0);
        let enc = EncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 4,
            dropout: 0.0,
        };
        let cfg = FlowConfig {
            vf_layers: 0,
            vf_hidden: 4,
            ..FlowConfig::default()
        };
        let mut model = GuidedFlowModel::new(2, 4, cfg, enc, &mut rng);
        let in_dim = 2 + 4 + 1;
        let mut w = Matrix::zeros(in_dim, 2);
        for &(r, c, v) in weights {
            w.set(r, c, v);
        }
        model.store_mut().set("vf.w0", w);
        model
            .store_mut()
            .set("vf.b0", Matrix::row_vector(bias.to_vec()));
        model
    }

    #[test]
    fn constant_field_translates_by_c() {
        let model = linear_field_model(&[], &[0.7, -1.3]);
        let out = flow_forward(&model, &[0.2, 0.4], &[0.0; 4], 1.0, &OdeConfig::default()).unwrap();
        assert!((out[0] - 0.9).abs() < 1e-9);
        assert!((out[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn linear_field_scales_by_e() {
        // u(t, x) = x
        let model = linear_field_model(&[(0, 0, 1.0), (1, 1, 1.0)], &[0.0, 0.0]);
        let cfg = OdeConfig::default();
        let out = flow_forward(&model, &[1.0, -0.5], &[0.0; 4], 1.0, &cfg).unwrap();
        let e = std::f64::consts::E;
        assert!((out[0] - e).abs() < 1e-5);
        assert!((out[1] + 0.5 * e).abs() < 1e-5);
        let back = flow_inverse(&model, &[1.0, 2.0], &[0.0; 4], 1.0, &cfg).unwrap();
        assert!((back[0] - (-1.0f64).exp()).abs() < 1e-5);
        assert!((back[1] - 2.0 * (-1.0f64).exp()).abs() < 1e-5);
    }

    #[test]
    fn diagonal_field_logdet_is_the_trace() {
        // u(t, x) = diag(1, 2)·x: log|det J| over [0,1] is tr = 3
        let model = linear_field_model(&[(0, 0, 1.0), (1, 1, 2.0)], &[0.0, 0.0]);
        let (_, logdet) =
            flow_forward_logdet(&model, &[0.4, -0.7], &[0.0; 4], 1.0, &OdeConfig::default())
                .unwrap();
        assert!((logdet - 3.0).abs() < 1e-4, "got {logdet}");
    }

    #[test]
    fn zero_field_transport_is_identity() {
        let model = linear_field_model(&[], &[0.0, 0.0]);
        let cfg = OdeConfig::default();
        let out = flow_forward(&model, &[0.3, -0.8], &[0.0; 4], 1.3, &cfg).unwrap();
        assert_eq!(out, vec![0.3, -0.8]);
        let back = flow_inverse(&model, &[0.3, -0.8], &[0.0; 4], 1.3, &cfg).unwrap();
        assert_eq!(back, vec![0.3, -0.8]);
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let run = || {
            let mut model = tiny_model(23);
            let mut opt = AdamState::new(model.store());
            let mut rng = StdRng::seed_from_u64(31);
            let batch: Vec<(ContextWindow<f64>, Vec<f64>)> = (0..4)
                .map(|i| {
                    let tokens = Matrix::from_vec(
                        2,
                        4,
                        (0..8).map(|j| ((i * 8 + j) as f64 * 0.11).cos()).collect(),
                    );
                    (ContextWindow::new(tokens), vec![0.1 * i as f64, -0.2])
                })
                .collect();
            (0..20)
                .map(|_| train_step(&mut model, &mut opt, &mut rng, &batch).unwrap())
                .collect::<Vec<f64>>()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut model = tiny_model(1);
        let mut opt = AdamState::new(model.store());
        let mut rng = StdRng::seed_from_u64(2);
        assert!(matches!(
            train_step(&mut model, &mut opt, &mut rng, &[]),
            Err(FlowError::EmptyBatch)
        ));
    }
}
