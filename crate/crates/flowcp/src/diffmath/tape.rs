//! Wengert tape over matrix-valued operations.
//!
//! The forward pass records one node per operation; `backward_from` replays
//! the tape in reverse, accumulating adjoints. Operations are the minimal set
//! needed for softplus MLPs and transformer blocks: matmul, broadcast bias,
//! elementwise softplus, row softmax, row layer norm, row mean pooling,
//! column slicing/concatenation and dropout masks.

use crate::diffmath::matrix::Matrix;
use crate::diffmath::store::{Gradients, ParamStore};
use crate::diffmath::{sigmoid, softplus};
use crate::scalar::Real;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<R: Real> {
    /// Leaf referencing a store parameter.
    Param(usize),
    /// Differentiable leaf holding the value directly (network inputs).
    Input,
    /// Non-differentiable leaf.
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `a (n×d) + row (1×d)` broadcast over rows.
    AddRow(NodeId, NodeId),
    ScaleConst(NodeId, R),
    Softplus(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: R,
    },
    MeanRows(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    Transpose(NodeId),
    /// Elementwise multiply by a fixed mask (inverted dropout).
    Mask(NodeId, Matrix<R>),
}

/// Recorded forward pass over a read-only [`ParamStore`].
pub struct Tape<'a, R: Real> {
    store: &'a ParamStore<R>,
    ops: Vec<Op<R>>,
    vals: Vec<Matrix<R>>,
    output: Option<NodeId>,
    consumed: bool,
}

impl<'a, R: Real> Tape<'a, R> {
    pub fn new(store: &'a ParamStore<R>) -> Self {
        Tape {
            store,
            ops: Vec::new(),
            vals: Vec::new(),
            output: None,
            consumed: false,
        }
    }

    pub fn store(&self) -> &ParamStore<R> {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Matrix<R> {
        &self.vals[id.0]
    }

    /// Mark the node whose adjoint `grad_params` seeds.
    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    fn push(&mut self, op: Op<R>, val: Matrix<R>) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.vals.push(val);
        id
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        let pid = self
            .store
            .id_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.push(Op::Param(pid), self.store.by_id(pid).clone())
    }

    pub fn input(&mut self, value: Matrix<R>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn constant(&mut self, value: Matrix<R>) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = self.vals[a.0].matmul(&self.vals[b.0]);
        self.push(Op::MatMul(a, b), val)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = self.vals[a.0].add(&self.vals[b.0]);
        self.push(Op::Add(a, b), val)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = self.vals[a.0].sub(&self.vals[b.0]);
        self.push(Op::Sub(a, b), val)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (&self.vals[a.0], &self.vals[row.0]);
        assert_eq!(rv.rows(), 1, "bias must be a row vector");
        assert_eq!(av.cols(), rv.cols(), "bias width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.at(r, c) + rv.at(0, c);
                out.set(r, c, v);
            }
        }
        self.push(Op::AddRow(a, row), out)
    }

    pub fn scale_const(&mut self, a: NodeId, s: R) -> NodeId {
        let val = self.vals[a.0].scale(s);
        self.push(Op::ScaleConst(a, s), val)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let val = self.vals[a.0].map(softplus);
        self.push(Op::Softplus(a), val)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.vals[a.0];
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(R::neg_infinity(), R::max);
            let mut sum = R::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: R) -> NodeId {
        let xv = &self.vals[x.0];
        let (gv, bv) = (&self.vals[gain.0], &self.vals[bias.0]);
        assert_eq!(gv.rows(), 1);
        assert_eq!(bv.rows(), 1);
        assert_eq!(gv.cols(), xv.cols());
        assert_eq!(bv.cols(), xv.cols());
        let d = R::of_usize(xv.cols());
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().fold(R::zero(), |a, &v| a + v) / d;
            let var = row
                .iter()
                .fold(R::zero(), |a, &v| a + (v - mean) * (v - mean))
                / d;
            let s = (var + eps).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / s * gv.at(0, c) + bv.at(0, c);
            }
        }
        self.push(Op::LayerNormRows { x, gain, bias, eps }, out)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.vals[a.0];
        let n = R::of_usize(x.rows());
        let mut out = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let v = out.at(0, c) + x.at(r, c) / n;
                out.set(0, c, v);
            }
        }
        self.push(Op::MeanRows(a), out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = &self.vals[a.0];
        assert!(start + len <= x.cols(), "slice out of bounds");
        let mut out = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r)
                .copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x: a, start, len }, out)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = &self.vals[a.0];
        assert!(start + len <= x.rows(), "slice out of bounds");
        let mut out = Matrix::zeros(len, x.cols());
        for r in 0..len {
            out.row_mut(r).copy_from_slice(x.row(start + r));
        }
        self.push(Op::SliceRows { x: a, start, len }, out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.vals[parts[0].0].rows();
        let total: usize = parts.iter().map(|p| self.vals[p.0].cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let x = &self.vals[p.0];
            assert_eq!(x.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + x.cols()].copy_from_slice(x.row(r));
            }
            offset += x.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let val = self.vals[a.0].transpose();
        self.push(Op::Transpose(a), val)
    }

    pub fn mask(&mut self, a: NodeId, mask: Matrix<R>) -> NodeId {
        let x = &self.vals[a.0];
        assert_eq!(x.shape(), mask.shape());
        let mut out = x.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(mask.data()) {
            *v = *v * m;
        }
        self.push(Op::Mask(a, mask), out)
    }

    /// Reverse pass from `seed_at` with adjoint `seed`. Does not consume the
    /// tape; callers needing several seeds (Jacobians) call it repeatedly.
    pub fn backward_from(&self, seed_at: NodeId, seed: Matrix<R>) -> TapeAdjoints<R> {
        assert_eq!(
            self.vals[seed_at.0].shape(),
            seed.shape(),
            "seed shape must match the seeded node"
        );
        let mut adj: Vec<Option<Matrix<R>>> = vec![None; self.ops.len()];
        adj[seed_at.0] = Some(seed);

        for i in (0..=seed_at.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            match &self.ops[i] {
                Op::Param(_) | Op::Input | Op::Constant => {
                    adj[i] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = dy.matmul_nt(&self.vals[b.0]);
                    let db = self.vals[a.0].matmul_tn(&dy);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, dy.clone());
                    acc(&mut adj, *b, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, dy.clone());
                    acc(&mut adj, *b, dy.scale(-R::one()));
                }
                Op::AddRow(a, row) => {
                    let mut drow = Matrix::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for c in 0..dy.cols() {
                            let v = drow.at(0, c) + dy.at(r, c);
                            drow.set(0, c, v);
                        }
                    }
                    acc(&mut adj, *a, dy);
                    acc(&mut adj, *row, drow);
                }
                Op::ScaleConst(a, s) => {
                    acc(&mut adj, *a, dy.scale(*s));
                }
                Op::Softplus(a) => {
                    let x = &self.vals[a.0];
                    let mut dx = dy;
                    for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        *g = *g * sigmoid(xv);
                    }
                    acc(&mut adj, *a, dx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.vals[i];
                    let mut dx = dy;
                    for r in 0..dx.rows() {
                        let yr = y.row(r);
                        let dr = dx.row_mut(r);
                        let dot = dr
                            .iter()
                            .zip(yr)
                            .fold(R::zero(), |acc, (&g, &yv)| acc + g * yv);
                        for (g, &yv) in dr.iter_mut().zip(yr) {
                            *g = (*g - dot) * yv;
                        }
                    }
                    acc(&mut adj, *a, dx);
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    let xv = &self.vals[x.0];
                    let gv = &self.vals[gain.0];
                    let d = R::of_usize(xv.cols());
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut dgain = Matrix::zeros(1, xv.cols());
                    let mut dbias = Matrix::zeros(1, xv.cols());
                    for r in 0..xv.rows() {
                        let xr = xv.row(r);
                        let mean = xr.iter().fold(R::zero(), |a, &v| a + v) / d;
                        let var = xr
                            .iter()
                            .fold(R::zero(), |a, &v| a + (v - mean) * (v - mean))
                            / d;
                        let s = (var + *eps).sqrt();
                        // x̂, dŷ and the two row means the gradient needs
                        let xhat: Vec<R> = xr.iter().map(|&v| (v - mean) / s).collect();
                        let dyr = dy.row(r);
                        let mut dxhat = vec![R::zero(); xr.len()];
                        for c in 0..xr.len() {
                            let g = dyr[c];
                            dgain.set(0, c, dgain.at(0, c) + g * xhat[c]);
                            dbias.set(0, c, dbias.at(0, c) + g);
                            dxhat[c] = g * gv.at(0, c);
                        }
                        let m1 = dxhat.iter().fold(R::zero(), |a, &v| a + v) / d;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat)
                            .fold(R::zero(), |a, (&g, &xh)| a + g * xh)
                            / d;
                        for c in 0..xr.len() {
                            dx.set(r, c, (dxhat[c] - m1 - xhat[c] * m2) / s);
                        }
                    }
                    acc(&mut adj, *x, dx);
                    acc(&mut adj, *gain, dgain);
                    acc(&mut adj, *bias, dbias);
                }
                Op::MeanRows(a) => {
                    let rows = self.vals[a.0].rows();
                    let n = R::of_usize(rows);
                    let mut dx = Matrix::zeros(rows, dy.cols());
                    for r in 0..rows {
                        for c in 0..dy.cols() {
                            dx.set(r, c, dy.at(0, c) / n);
                        }
                    }
                    acc(&mut adj, *a, dx);
                }
                Op::SliceCols { x, start, len } => {
                    let xv = &self.vals[x.0];
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..dy.rows() {
                        dx.row_mut(r)[*start..*start + *len].copy_from_slice(dy.row(r));
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::SliceRows { x, start, len } => {
                    let xv = &self.vals[x.0];
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..*len {
                        dx.row_mut(start + r).copy_from_slice(dy.row(r));
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.vals[p.0].cols();
                        let mut dp = Matrix::zeros(dy.rows(), w);
                        for r in 0..dy.rows() {
                            dp.row_mut(r)
                                .copy_from_slice(&dy.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut adj, *p, dp);
                    }
                }
                Op::Transpose(a) => {
                    acc(&mut adj, *a, dy.transpose());
                }
                Op::Mask(a, mask) => {
                    let mut dx = dy;
                    for (g, &m) in dx.data_mut().iter_mut().zip(mask.data()) {
                        *g = *g * m;
                    }
                    acc(&mut adj, *a, dx);
                }
            }
        }

        TapeAdjoints { adj }
    }

    /// One-shot parameter gradients of `upstream · output`. Errors if the
    /// tape was already consumed.
    pub fn grad_params(&mut self, upstream: &[R]) -> Result<Gradients<R>, super::DiffError> {
        if self.consumed {
            return Err(super::DiffError::TapeConsumed);
        }
        let out = self.output.ok_or(super::DiffError::NoOutput)?;
        let shape = self.vals[out.0].shape();
        if upstream.len() != shape.0 * shape.1 {
            return Err(super::DiffError::ShapeMismatch {
                expected: shape.0 * shape.1,
                got: upstream.len(),
            });
        }
        self.consumed = true;
        let seed = Matrix::from_vec(shape.0, shape.1, upstream.to_vec());
        let adjoints = self.backward_from(out, seed);
        Ok(self.collect_param_grads(&adjoints))
    }

    /// Fold node adjoints into store-aligned gradients.
    pub fn collect_param_grads(&self, adjoints: &TapeAdjoints<R>) -> Gradients<R> {
        let mut grads = Gradients::zeros_like(self.store);
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Param(pid) = op {
                if let Some(a) = &adjoints.adj[i] {
                    grads.by_id_mut(*pid).add_assign(a);
                }
            }
        }
        grads
    }
}

/// Per-node adjoints from one reverse pass.
pub struct TapeAdjoints<R: Real> {
    adj: Vec<Option<Matrix<R>>>,
}

impl<R: Real> TapeAdjoints<R> {
    pub fn of(&self, id: NodeId) -> Option<&Matrix<R>> {
        self.adj[id.0].as_ref()
    }
}

fn acc<R: Real>(adj: &mut [Option<Matrix<R>>], id: NodeId, delta: Matrix<R>) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&delta),
        slot => *slot = Some(delta),
    }
}
