//! Context encoder: a small transformer that turns a window of past
//! features and residuals into the guidance vector h, plus the learned
//! null guidance h_∅ used by classifier-free guidance.
//!
//! Stack: sinusoidal positional encodings added to the raw tokens, a linear
//! embedding into `model_dim`, pre-LayerNorm blocks (multi-head attention,
//! then a 2-layer feed-forward of width 4×model_dim with softplus), a final
//! LayerNorm, and last-token pooling (the current position carries the
//! freshest context; attention mixes in the rest of the window).

use rand::RngExt;

use crate::diffmath::{Matrix, NodeId, ParamStore, Tape};
use crate::scalar::Real;

pub const NULL_GUIDANCE_NAME: &str = "h_null";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            heads: 2,
            model_dim: 32,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 {
            return Err("encoder layers, heads and model_dim must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return Err(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Window of `w` past tokens, each the feature vector concatenated with the
/// prediction residual (zero-filled where history is unavailable).
#[derive(Debug, Clone)]
pub struct ContextWindow<R: Real> {
    tokens: Matrix<R>,
}

impl<R: Real> ContextWindow<R> {
    pub fn new(tokens: Matrix<R>) -> Self {
        assert!(tokens.rows() >= 1, "window needs at least one token");
        ContextWindow { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn tokens(&self) -> &Matrix<R> {
        &self.tokens
    }
}

/// Guidance vector h ∈ R^{model_dim}.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance<R: Real> {
    pub h: Vec<R>,
}

/// Transformer encoder description; parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    token_dim: usize,
    prefix: String,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, token_dim: usize) -> Self {
        cfg.validate().expect("valid encoder config");
        Encoder {
            cfg,
            token_dim,
            prefix: "enc".into(),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.model_dim
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    /// Register all encoder parameters plus the learned null guidance.
    pub fn init_params<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl RngExt) {
        let d = self.cfg.model_dim;
        fn uniform<R: Real>(
            store: &mut ParamStore<R>,
            rng: &mut impl RngExt,
            name: String,
            rows: usize,
            cols: usize,
        ) {
            let bound = (1.0 / rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| R::of((rng.random::<f64>() * 2.0 - 1.0) * bound))
                .collect();
            store.insert(name, Matrix::from_vec(rows, cols, data));
        }

        uniform(store, rng, self.name("embed.w"), self.token_dim, d);
        store.insert(self.name("embed.b"), Matrix::zeros(1, d));
        for l in 0..self.cfg.layers {
            for part in ["ln1", "ln2"] {
                store.insert(self.name(&format!("l{l}.{part}.gain")), ones(1, d));
                store.insert(self.name(&format!("l{l}.{part}.bias")), Matrix::zeros(1, d));
            }
            for part in ["wq", "wk", "wv", "wo"] {
                uniform(store, rng, self.name(&format!("l{l}.attn.{part}")), d, d);
            }
            store.insert(self.name(&format!("l{l}.attn.bo")), Matrix::zeros(1, d));
            uniform(store, rng, self.name(&format!("l{l}.ffn.w1")), d, 4 * d);
            store.insert(self.name(&format!("l{l}.ffn.b1")), Matrix::zeros(1, 4 * d));
            uniform(store, rng, self.name(&format!("l{l}.ffn.w2")), 4 * d, d);
            store.insert(self.name(&format!("l{l}.ffn.b2")), Matrix::zeros(1, d));
        }
        store.insert(self.name("final_ln.gain"), ones(1, d));
        store.insert(self.name("final_ln.bias"), Matrix::zeros(1, d));

        let bound = (1.0 / d as f64).sqrt();
        let h0 = (0..d)
            .map(|_| R::of((rng.random::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        store.insert(NULL_GUIDANCE_NAME, Matrix::row_vector(h0));
    }

    /// Record the encoder forward pass on `tape`, returning the pooled
    /// guidance node (1 × model_dim). `dropout_rng` enables training-mode
    /// inverted dropout; evaluation passes `None` and is deterministic.
    pub fn forward_tape<R: Real>(
        &self,
        tape: &mut Tape<R>,
        window: &ContextWindow<R>,
        mut dropout_rng: Option<&mut dyn FnMut() -> f64>,
    ) -> NodeId {
        assert_eq!(window.token_dim(), self.token_dim, "token width mismatch");
        let d = self.cfg.model_dim;
        let heads = self.cfg.heads;
        let head_dim = d / heads;
        let eps = R::of(LN_EPS);

        // positional encoding on the raw tokens, then linear embedding
        let with_pe = add_positional(window.tokens());
        let tok = tape.constant(with_pe);
        let embed_w = tape.param(&self.name("embed.w"));
        let embed_b = tape.param(&self.name("embed.b"));
        let projected = tape.matmul(tok, embed_w);
        let mut x = tape.add_row(projected, embed_b);

        let scale = R::one() / R::of_usize(head_dim).sqrt();
        for l in 0..self.cfg.layers {
            // attention sublayer, pre-LN
            let g1 = tape.param(&self.name(&format!("l{l}.ln1.gain")));
            let b1 = tape.param(&self.name(&format!("l{l}.ln1.bias")));
            let normed = tape.layer_norm_rows(x, g1, b1, eps);
            let wq = tape.param(&self.name(&format!("l{l}.attn.wq")));
            let wk = tape.param(&self.name(&format!("l{l}.attn.wk")));
            let wv = tape.param(&self.name(&format!("l{l}.attn.wv")));
            let q = tape.matmul(normed, wq);
            let k = tape.matmul(normed, wk);
            let v = tape.matmul(normed, wv);
            let mut head_outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qs = tape.slice_cols(q, hd * head_dim, head_dim);
                let ks = tape.slice_cols(k, hd * head_dim, head_dim);
                let vs = tape.slice_cols(v, hd * head_dim, head_dim);
                let kt = tape.transpose(ks);
                let logits = tape.matmul(qs, kt);
                let scaled = tape.scale_const(logits, scale);
                let weights = tape.softmax_rows(scaled);
                head_outs.push(tape.matmul(weights, vs));
            }
            let merged = tape.concat_cols(&head_outs);
            let wo = tape.param(&self.name(&format!("l{l}.attn.wo")));
            let bo = tape.param(&self.name(&format!("l{l}.attn.bo")));
            let proj = tape.matmul(merged, wo);
            let mut attn = tape.add_row(proj, bo);
            attn = self.maybe_dropout(tape, attn, &mut dropout_rng);
            x = tape.add(x, attn);

            // feed-forward sublayer, pre-LN
            let g2 = tape.param(&self.name(&format!("l{l}.ln2.gain")));
            let b2 = tape.param(&self.name(&format!("l{l}.ln2.bias")));
            let normed = tape.layer_norm_rows(x, g2, b2, eps);
            let w1 = tape.param(&self.name(&format!("l{l}.ffn.w1")));
            let bf1 = tape.param(&self.name(&format!("l{l}.ffn.b1")));
            let w2 = tape.param(&self.name(&format!("l{l}.ffn.w2")));
            let bf2 = tape.param(&self.name(&format!("l{l}.ffn.b2")));
            let h1 = tape.matmul(normed, w1);
            let h1 = tape.add_row(h1, bf1);
            let h1 = tape.softplus(h1);
            let h2 = tape.matmul(h1, w2);
            let mut ffn = tape.add_row(h2, bf2);
            ffn = self.maybe_dropout(tape, ffn, &mut dropout_rng);
            x = tape.add(x, ffn);
        }

        let gf = tape.param(&self.name("final_ln.gain"));
        let bf = tape.param(&self.name("final_ln.bias"));
        let normed = tape.layer_norm_rows(x, gf, bf, eps);
        // last-token pooling: the final position carries the current
        // feature vector, which mean pooling would dilute by 1/w
        tape.slice_rows(normed, window.len() - 1, 1)
    }

    fn maybe_dropout<R: Real>(
        &self,
        tape: &mut Tape<R>,
        x: NodeId,
        dropout_rng: &mut Option<&mut dyn FnMut() -> f64>,
    ) -> NodeId {
        let p = self.cfg.dropout;
        let Some(rng) = dropout_rng else { return x };
        if p == 0.0 {
            return x;
        }
        let (rows, cols) = tape.value(x).shape();
        let keep = R::of(1.0 / (1.0 - p));
        let mask = Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| if rng() < p { R::zero() } else { keep })
                .collect(),
        );
        tape.mask(x, mask)
    }

    /// Deterministic evaluation-mode encoding.
    pub fn encode<R: Real>(&self, store: &ParamStore<R>, window: &ContextWindow<R>) -> Guidance<R> {
        let mut tape = Tape::new(store);
        let out = self.forward_tape(&mut tape, window, None);
        Guidance {
            h: tape.value(out).data().to_vec(),
        }
    }
}

/// The learned null guidance h_∅.
pub fn null_guidance<R: Real>(store: &ParamStore<R>) -> Guidance<R> {
    Guidance {
        h: store
            .get(NULL_GUIDANCE_NAME)
            .expect("null guidance registered")
            .data()
            .to_vec(),
    }
}

fn ones<R: Real>(rows: usize, cols: usize) -> Matrix<R> {
    Matrix::from_vec(rows, cols, vec![R::one(); rows * cols])
}

/// Sinusoidal positional encodings added to the raw tokens.
fn add_positional<R: Real>(tokens: &Matrix<R>) -> Matrix<R> {
    let (rows, cols) = tokens.shape();
    let mut out = tokens.clone();
    for pos in 0..rows {
        for c in 0..cols {
            let pair = (c / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair / cols as f64);
            let angle = pos as f64 * freq;
            let pe = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            let v = out.at(pos, c) + R::of(pe);
            out.set(pos, c, v);
        }
    }
    out
}
