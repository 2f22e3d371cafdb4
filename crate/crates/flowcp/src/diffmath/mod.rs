//! Dense linear algebra and reverse-mode differentiation for the MLP and
//! attention blocks used by the vector field and the context encoder.

mod adam;
mod matrix;
mod mlp;
mod store;
mod tape;

pub use adam::{adam_step, AdamState};
pub use matrix::Matrix;
pub use mlp::Mlp;
pub use store::{Gradients, ParamStore};
pub use tape::{NodeId, Tape, TapeAdjoints};

use crate::scalar::Real;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch: expected width {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("tape already consumed")]
    TapeConsumed,
    #[error("tape has no output node")]
    NoOutput,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Overflow-safe softplus ln(1 + eˣ).
pub fn softplus<R: Real>(x: R) -> R {
    if x > R::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, the softplus derivative.
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}
