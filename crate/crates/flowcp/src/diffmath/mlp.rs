//! Feed-forward network with softplus activations, evaluated either on the
//! tape (for gradients) or directly (hot loops inside ODE solves).

use rand::RngExt;

use crate::diffmath::matrix::Matrix;
use crate::diffmath::store::ParamStore;
use crate::diffmath::tape::{NodeId, Tape};
use crate::diffmath::{softplus, DiffError};
use crate::scalar::Real;

/// MLP layout: `dims[0]` inputs, hidden layers with softplus, linear output.
/// Parameters live in a [`ParamStore`] under `"{prefix}.w{i}"` / `"{prefix}.b{i}"`.
#[derive(Debug, Clone)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
}

impl Mlp {
    /// `hidden` copies of width `width` between `in_dim` and `out_dim`.
    pub fn new(
        prefix: impl Into<String>,
        in_dim: usize,
        width: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(width).take(hidden));
        dims.push(out_dim);
        Mlp {
            prefix: prefix.into(),
            dims,
        }
    }

    /// Explicit layer widths, e.g. `[2, 8, 2]`.
    pub fn from_dims(prefix: impl Into<String>, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        Mlp {
            prefix: prefix.into(),
            dims,
        }
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    pub fn output_width(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    fn w_name(&self, i: usize) -> String {
        format!("{}.w{i}", self.prefix)
    }

    fn b_name(&self, i: usize) -> String {
        format!("{}.b{i}", self.prefix)
    }

    /// Register weights drawn uniformly from ±√(1/fan_in) and zero biases.
    pub fn init_params<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl RngExt) {
        for i in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.dims[i], self.dims[i + 1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| R::of((rng.random::<f64>() * 2.0 - 1.0) * bound))
                .collect();
            store.insert(self.w_name(i), Matrix::from_vec(fan_in, fan_out, data));
            store.insert(self.b_name(i), Matrix::zeros(1, fan_out));
        }
    }

    /// Record the forward pass on a tape; `x` has `input_width` columns.
    pub fn forward_tape<R: Real>(&self, tape: &mut Tape<R>, x: NodeId) -> NodeId {
        let mut cur = x;
        for i in 0..self.layer_count() {
            let w = tape.param(&self.w_name(i));
            let b = tape.param(&self.b_name(i));
            let lin = tape.matmul(cur, w);
            cur = tape.add_row(lin, b);
            if i + 1 < self.layer_count() {
                cur = tape.softplus(cur);
            }
        }
        cur
    }

    /// Tape-backed single-input evaluation. Returns the output row and the
    /// tape set up for one `grad_params` pass.
    pub fn forward<'a, R: Real>(
        &self,
        store: &'a ParamStore<R>,
        input: &[R],
    ) -> Result<(Vec<R>, Tape<'a, R>), DiffError> {
        if input.len() != self.input_width() {
            return Err(DiffError::ShapeMismatch {
                expected: self.input_width(),
                got: input.len(),
            });
        }
        let mut tape = Tape::new(store);
        let x = tape.input(Matrix::row_vector(input.to_vec()));
        let out = self.forward_tape(&mut tape, x);
        tape.set_output(out);
        let y = tape.value(out).data().to_vec();
        Ok((y, tape))
    }

    /// Tapeless batched evaluation: `x` is `n × input_width`.
    pub fn eval_batch<R: Real>(&self, store: &ParamStore<R>, x: &Matrix<R>) -> Matrix<R> {
        assert_eq!(x.cols(), self.input_width(), "input width mismatch");
        let mut cur = x.clone();
        for i in 0..self.layer_count() {
            let w = store.get(&self.w_name(i)).expect("mlp weights registered");
            let b = store.get(&self.b_name(i)).expect("mlp biases registered");
            let mut lin = cur.matmul(w);
            for r in 0..lin.rows() {
                let row = lin.row_mut(r);
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v = *v + bv;
                }
            }
            if i + 1 < self.layer_count() {
                for v in lin.data_mut() {
                    *v = softplus(*v);
                }
            }
            cur = lin;
        }
        cur
    }

    pub fn eval<R: Real>(&self, store: &ParamStore<R>, input: &[R]) -> Vec<R> {
        self.eval_batch(store, &Matrix::row_vector(input.to_vec()))
            .into_data()
    }

    /// Exact input Jacobian (`d_out × d_in`) via one reverse pass per output.
    pub fn jacobian_input<R: Real>(
        &self,
        store: &ParamStore<R>,
        input: &[R],
    ) -> Result<Matrix<R>, DiffError> {
        if input.len() != self.input_width() {
            return Err(DiffError::ShapeMismatch {
                expected: self.input_width(),
                got: input.len(),
            });
        }
        let mut tape = Tape::new(store);
        let x = tape.input(Matrix::row_vector(input.to_vec()));
        let out = self.forward_tape(&mut tape, x);
        let d_out = tape.value(out).cols();
        let d_in = input.len();
        let mut jac = Matrix::zeros(d_out, d_in);
        for k in 0..d_out {
            let mut seed = Matrix::zeros(1, d_out);
            seed.set(0, k, R::one());
            let adj = tape.backward_from(out, seed);
            let dx = adj.of(x).expect("input participates in the output");
            jac.row_mut(k).copy_from_slice(dx.row(0));
        }
        Ok(jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn identity_store() -> (Mlp, ParamStore<f64>) {
        let mlp = Mlp::from_dims("net", vec![2, 2]);
        let mut store = ParamStore::new();
        store.insert("net.w0", Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        store.insert("net.b0", Matrix::zeros(1, 2));
        (mlp, store)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let (mlp, store) = identity_store();
        let (y, _) = mlp.forward(&store, &[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn diagonal_layer_with_bias() {
        let mlp = Mlp::from_dims("net", vec![2, 2]);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("net.w0", Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 3.0]));
        store.insert("net.b0", Matrix::row_vector(vec![1.0, 1.0]));
        let (y, _) = mlp.forward(&store, &[1.0, 1.0]).unwrap();
        assert_eq!(y, vec![3.0, 4.0]);
    }

    #[test]
    fn zero_weights_yield_bias() {
        let mlp = Mlp::from_dims("net", vec![3, 2]);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("net.w0", Matrix::zeros(3, 2));
        store.insert("net.b0", Matrix::row_vector(vec![0.5, -0.5]));
        let (y, _) = mlp.forward(&store, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(y, vec![0.5, -0.5]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mlp = Mlp::new("net", 3, 8, 2, 2);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(7);
        mlp.init_params(&mut store, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let a = mlp.eval(&store, &x);
        let b = mlp.eval(&store, &x);
        assert_eq!(a, b);
        let (c, _) = mlp.forward(&store, &x).unwrap();
        for (u, v) in a.iter().zip(&c) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn linear_net_jacobian_is_the_weight_matrix() {
        let mlp = Mlp::from_dims("net", vec![2, 3]);
        let mut store = ParamStore::new();
        let w: Matrix<f64> = Matrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]);
        store.insert("net.w0", w.clone());
        store.insert("net.b0", Matrix::zeros(1, 3));
        let jac = mlp.jacobian_input(&store, &[0.4, -0.9]).unwrap();
        // Jacobian rows are outputs, so it equals Wᵀ.
        let wt = w.transpose();
        for (a, b) in jac.data().iter().zip(wt.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_jacobian_at_zero_is_half() {
        let mlp = Mlp::from_dims("net", vec![2, 2, 2]);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("net.w0", Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        store.insert("net.b0", Matrix::zeros(1, 2));
        store.insert("net.w1", Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        store.insert("net.b1", Matrix::zeros(1, 2));
        // y = softplus(x); dy/dx at 0 = σ(0) = 0.5 on the diagonal
        let jac = mlp.jacobian_input(&store, &[0.0, 0.0]).unwrap();
        assert!((jac.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((jac.at(1, 1) - 0.5).abs() < 1e-15);
        assert!(jac.at(0, 1).abs() < 1e-15);
        assert!(jac.at(1, 0).abs() < 1e-15);
    }

    #[test]
    fn grad_params_single_weight() {
        // y = w·x with x=2: dy/dw = 2
        let mlp = Mlp::from_dims("net", vec![1, 1]);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("net.w0", Matrix::row_vector(vec![1.5]));
        store.insert("net.b0", Matrix::zeros(1, 1));
        let (_, mut tape) = mlp.forward(&store, &[2.0]).unwrap();
        let grads = tape.grad_params(&[1.0]).unwrap();
        assert_eq!(grads.get(&store, "net.w0").unwrap().at(0, 0), 2.0);
        assert_eq!(grads.get(&store, "net.b0").unwrap().at(0, 0), 1.0);
        // second call errors: tape consumed
        assert!(tape.grad_params(&[1.0]).is_err());
    }

    #[test]
    fn grad_of_softplus_weight_is_half_at_zero() {
        // y = softplus(w x), w = 0, x = 1: dy/dw = σ(0)·x = 0.5
        let mlp = Mlp::from_dims("net", vec![1, 1, 1]);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("net.w0", Matrix::row_vector(vec![0.0]));
        store.insert("net.b0", Matrix::zeros(1, 1));
        store.insert("net.w1", Matrix::row_vector(vec![1.0]));
        store.insert("net.b1", Matrix::zeros(1, 1));
        let (_, mut tape) = mlp.forward(&store, &[1.0]).unwrap();
        let grads = tape.grad_params(&[1.0]).unwrap();
        assert!((grads.get(&store, "net.w0").unwrap().at(0, 0) - 0.5).abs() < 1e-15);
    }
}
