//! Adam optimizer over a [`ParamStore`].

use crate::diffmath::matrix::Matrix;
use crate::diffmath::store::{Gradients, ParamStore};
use crate::scalar::Real;

/// First/second moment estimates, aligned with the store by index.
#[derive(Debug, Clone)]
pub struct AdamState<R: Real> {
    m: Vec<Matrix<R>>,
    v: Vec<Matrix<R>>,
    step: u64,
    beta1: R,
    beta2: R,
    eps: R,
}

impl<R: Real> AdamState<R> {
    /// Canonical defaults: β1 = 0.9, β2 = 0.999, ε = 1e−8.
    pub fn new(store: &ParamStore<R>) -> Self {
        let zeros: Vec<Matrix<R>> = (0..store.len())
            .map(|i| {
                let (r, c) = store.by_id(i).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: R::of(0.9),
            beta2: R::of(0.999),
            eps: R::of(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<R: Real>(
    params: &mut ParamStore<R>,
    grads: &Gradients<R>,
    state: &mut AdamState<R>,
    lr: R,
) {
    assert_eq!(
        params.len(),
        grads.len(),
        "gradient store must align with params"
    );
    state.step += 1;
    let t = R::of(state.step as f64);
    let bc1 = R::one() - state.beta1.powf(t);
    let bc2 = R::one() - state.beta2.powf(t);
    for id in 0..params.len() {
        let g = grads.by_id(id);
        let m = &mut state.m[id];
        let v = &mut state.v[id];
        let p = params.by_id_mut(id);
        for k in 0..p.len() {
            let gk = g.data()[k];
            let mk = state.beta1 * m.data()[k] + (R::one() - state.beta1) * gk;
            let vk = state.beta2 * v.data()[k] + (R::one() - state.beta2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let m_hat = mk / bc1;
            let v_hat = vk / bc2;
            p.data_mut()[k] = p.data()[k] - lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
}
