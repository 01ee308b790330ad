//! Reverse-mode automatic differentiation over a per-example tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with the forward value. [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar with respect to every parameter touched.
//! Parameters are borrowed from a [`ParamStore`], so a graph is cheap to
//! build and throw away per example.

use std::hash::{DefaultHasher, Hash, Hasher};

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{Gradients, NnError, ParamId, ParamStore, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    Param(ParamId),
    Embed {
        table: ParamId,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Unfold {
        x: Var,
        window: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Stack(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Tensor,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    SoftmaxXent {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

/// Offset of the first element of an `l`-wide window relative to its centre
/// position: the window for position `k` spans `k - before ..= k + l/2`.
pub fn window_before(window: usize) -> usize {
    (window - 1) / 2
}

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            values: Vec::with_capacity(256),
            ops: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.ops.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.ops[v.0] {
            Op::Param(id) => self.params.value(id),
            _ => &self.values[v.0],
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Tensor::empty(), Op::Param(id))
    }

    /// Row gather from a `[V, d]` table. Id 0 is padding and always yields zeros.
    pub fn embed(&mut self, table: ParamId, ids: &[u32]) -> Result<Var, NnError> {
        let t = self.params.value(table);
        let (vocab, d) = t.dims2();
        let mut data = vec![0.0; ids.len() * d];
        let mut idx = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= vocab {
                return Err(NnError::IdOutOfRange { id, vocab });
            }
            if id != 0 {
                data[i * d..(i + 1) * d].copy_from_slice(t.row_slice(id));
            }
            idx.push(id);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(value, Op::Embed { table, ids: idx }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose2();
        self.push(v, Op::Transpose(a))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check_same(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check_same(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check_same(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Broadcast-add a length-`d` bias to every row of `[n, d]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NnError> {
        let (_, d) = self.value(a).dims2();
        let b = self.value(bias);
        if b.len() != d {
            return Err(shape_err(format!(
                "add_row {:?} + {:?}",
                self.shape(a),
                b.shape()
            )));
        }
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(d) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (_, c) = x.dims2();
        let mut v = x.clone();
        for row in v.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalisation with learned gain and offset.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(shape_err(format!("layer_norm gain/offset length != {c}")));
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(r);
        for row in xhat.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, gi), bi) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gi + bi;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Sliding-window unfold of `[n, d]` into `[n, window·d]`, zero padded so
    /// row `k` holds positions `k - (window-1)/2 ..= k + window/2`.
    pub fn unfold(&mut self, x: Var, window: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        if n == 0 || window == 0 {
            return Err(shape_err("unfold of empty sequence".into()));
        }
        let before = window_before(window);
        let mut out = vec![0.0; n * window * d];
        for k in 0..n {
            for w in 0..window {
                let pos = k as isize + w as isize - before as isize;
                if pos < 0 || pos >= n as isize {
                    continue;
                }
                let dst = k * window * d + w * d;
                out[dst..dst + d].copy_from_slice(xv.row_slice(pos as usize));
            }
        }
        let v = Tensor::new(vec![n, window * d], out)?;
        Ok(self.push(v, Op::Unfold { x, window }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if start > end || end > c {
            return Err(shape_err(format!("slice_cols {start}..{end} of {c}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&xv.row_slice(i)[start..end]);
        }
        let v = Tensor::new(vec![r, w], data)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        if parts.iter().any(|&p| self.value(p).dims2().0 != rows) {
            return Err(shape_err("concat_cols row mismatch".into()));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let v = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let cols = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != cols {
                return Err(shape_err("concat_rows column mismatch".into()));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Stack equally shaped `[H, W]` matrices into a `[C, H, W]` volume.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let (h, w) = self.value(parts[0]).dims2();
        let mut data = Vec::with_capacity(parts.len() * h * w);
        for &p in parts {
            if self.value(p).dims2() != (h, w) {
                return Err(shape_err("stack of differently shaped channels".into()));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![parts.len(), h, w], data)?;
        Ok(self.push(v, Op::Stack(parts.to_vec())))
    }

    /// Stride-1 "same" 2-D convolution of `[C, H, W]` with `[F, C, k, k]`
    /// filters (odd `k`) and a length-`F` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (&[c, h, wd], &[f, wc, k, k2]) = (xv.shape(), wv.shape()) else {
            return Err(shape_err(format!(
                "conv2d {:?} * {:?}",
                xv.shape(),
                wv.shape()
            )));
        };
        if wc != c || k != k2 || k % 2 == 0 || self.value(b).len() != f {
            return Err(shape_err(format!(
                "conv2d {:?} * {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let cols = im2col(xv.data(), c, h, wd, k);
        let mut out = vec![0.0; f * h * wd];
        gemm_acc(wv.data(), cols.data(), &mut out, f, c * k * k, h * wd);
        let bias = self.value(b).data();
        for (fi, plane) in out.chunks_mut(h * wd).enumerate() {
            plane.iter_mut().for_each(|v| *v += bias[fi]);
        }
        let v = Tensor::new(vec![f, h, wd], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, cols }))
    }

    /// Non-overlapping `k × k` max pooling over `[C, H, W]`. Edge windows
    /// that are cut off by the border are kept, so the output is
    /// `[C, ceil(H/k), ceil(W/k)]`.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        let &[c, h, w] = xv.shape() else {
            return Err(shape_err(format!("max_pool on {:?}", xv.shape())));
        };
        let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        let data = xv.data();
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for i in oi * k..((oi + 1) * k).min(h) {
                        for j in oj * k..((oj + 1) * k).min(w) {
                            let idx = ci * h * w + i * w + j;
                            if data[idx] > best {
                                best = data[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        let v = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Cross-entropy of `softmax(logits)` against a class index.
    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Result<Var, NnError> {
        let mut probs = self.value(logits).data().to_vec();
        if label >= probs.len() {
            return Err(shape_err(format!(
                "label {label} for {} classes",
                probs.len()
            )));
        }
        let log_z = log_sum_exp(&probs);
        let loss = log_z - probs[label];
        softmax_in_place(&mut probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Hash of every piecewise-linear decision on the tape: the sign of each
    /// ReLU input and the winning index of each max-pool window. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for op in &self.ops {
            match op {
                Op::Relu(a) => {
                    for &x in self.value(*a).data() {
                        (x > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `root` with respect to every trainable parameter.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads = Gradients::new(self.params.len());
        let mut adj: Vec<Option<Tensor>> = Vec::new();
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.backward_node(i, g, &mut adj, &mut grads);
        }
        grads
    }

    fn backward_node(
        &self,
        i: usize,
        g: Tensor,
        adj: &mut [Option<Tensor>],
        grads: &mut Gradients,
    ) {
        let out = &self.values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Param(id) => {
                if self.params.get(*id).trainable {
                    grads.accumulate_dense(*id, &g);
                }
            }
            Op::Embed { table, ids } => {
                if !self.params.get(*table).trainable {
                    return;
                }
                let d = self.params.value(*table).dims2().1;
                for (k, &id) in ids.iter().enumerate() {
                    if id != 0 {
                        grads.accumulate_row(*table, d, id, &g.data()[k * d..(k + 1) * d]);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2();
                let n = bv.dims2().1;
                let mut ga = Tensor::zeros(av.shape());
                gemm_nt_acc(g.data(), bv.data(), ga.data_mut(), m, n, k);
                let mut gb = Tensor::zeros(bv.shape());
                gemm_tn_acc(av.data(), g.data(), gb.data_mut(), k, m, n);
                acc(adj, *a, ga);
                acc(adj, *b, gb);
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ, a: [m,k], b: [n,k]
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2();
                let n = bv.dims2().0;
                let mut ga = Tensor::zeros(av.shape());
                gemm_acc(g.data(), bv.data(), ga.data_mut(), m, n, k);
                let mut gb = Tensor::zeros(bv.shape());
                gemm_tn_acc(g.data(), av.data(), gb.data_mut(), n, m, k);
                acc(adj, *a, ga);
                acc(adj, *b, gb);
            }
            Op::Transpose(a) => {
                let ga = g.transpose2().reshaped(self.shape(*a)).expect("shape");
                acc(adj, *a, ga);
            }
            Op::Add(a, b) => {
                acc(adj, *b, reshape_like(g.clone(), self.value(*b)));
                acc(adj, *a, reshape_like(g, self.value(*a)));
            }
            Op::Sub(a, b) => {
                acc(adj, *b, reshape_like(g.map(|v| -v), self.value(*b)));
                acc(adj, *a, reshape_like(g, self.value(*a)));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                acc(adj, *a, reshape_like(ga, self.value(*a)));
                acc(adj, *b, reshape_like(gb, self.value(*b)));
            }
            Op::AddRow(a, bias) => {
                let bv = self.value(*bias);
                let d = bv.len();
                let mut gb = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (x, y) in gb.iter_mut().zip(row) {
                        *x += y;
                    }
                }
                acc(
                    adj,
                    *bias,
                    Tensor::new(bv.shape().to_vec(), gb).expect("shape"),
                );
                acc(adj, *a, g);
            }
            Op::Scale(a, s) => acc(adj, *a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                acc(adj, *a, ga);
            }
            Op::Tanh(a) => acc(adj, *a, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(adj, *a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
            Op::SoftmaxRows(a) => {
                let (_, c) = out.dims2();
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for (x, y) in grow.iter_mut().zip(yrow) {
                        *x = y * (*x - dot);
                    }
                }
                acc(adj, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (_, c) = xhat.dims2();
                let gv = self.value(*gamma).data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = Tensor::zeros(self.shape(*x));
                for (r, ((grow, hrow), xrow)) in g
                    .data()
                    .chunks(c)
                    .zip(xhat.data().chunks(c))
                    .zip(gx.data_mut().chunks_mut(c))
                    .enumerate()
                {
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        ggamma[j] += grow[j] * hrow[j];
                        gbeta[j] += grow[j];
                        let dh = grow[j] * gv[j];
                        sum_d += dh;
                        sum_dh += dh * hrow[j];
                    }
                    let s = inv_std[r] / c as f64;
                    for j in 0..c {
                        let dh = grow[j] * gv[j];
                        xrow[j] = s * (c as f64 * dh - sum_d - hrow[j] * sum_dh);
                    }
                }
                let gshape = self.shape(*gamma).to_vec();
                let bshape = self.shape(*beta).to_vec();
                acc(adj, *gamma, Tensor::new(gshape, ggamma).expect("shape"));
                acc(adj, *beta, Tensor::new(bshape, gbeta).expect("shape"));
                acc(adj, *x, gx);
            }
            Op::Unfold { x, window } => {
                let xv = self.value(*x);
                let (n, d) = xv.dims2();
                let before = window_before(*window);
                let mut gx = Tensor::zeros(xv.shape());
                let gd = g.data();
                let dst = gx.data_mut();
                for k in 0..n {
                    for w in 0..*window {
                        let pos = k as isize + w as isize - before as isize;
                        if pos < 0 || pos >= n as isize {
                            continue;
                        }
                        let src = k * window * d + w * d;
                        let p = pos as usize * d;
                        for j in 0..d {
                            dst[p + j] += gd[src + j];
                        }
                    }
                }
                acc(adj, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = xv.dims2();
                let w = g.dims2().1;
                let mut gx = Tensor::zeros(xv.shape());
                for i in 0..r {
                    gx.data_mut()[i * c + start..i * c + start + w]
                        .copy_from_slice(g.row_slice(i));
                }
                acc(adj, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.dims2().1;
                    let mut gp = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    acc(adj, p, Tensor::new(pv.shape().to_vec(), gp).expect("shape"));
                }
            }
            Op::ConcatRows(parts) | Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    let gp = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    acc(adj, p, Tensor::new(pv.shape().to_vec(), gp).expect("shape"));
                }
            }
            Op::Conv2d { x, w, b, cols } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let &[c, h, wd] = xv.shape() else { unreachable!() };
                let &[f, _, k, _] = wv.shape() else { unreachable!() };
                let ckk = c * k * k;
                let hw = h * wd;
                let gb: Vec<f64> = g.data().chunks(hw).map(|p| p.iter().sum()).collect();
                let mut gw = Tensor::zeros(wv.shape());
                gemm_nt_acc(g.data(), cols.data(), gw.data_mut(), f, hw, ckk);
                let mut gcols = vec![0.0; ckk * hw];
                gemm_tn_acc(wv.data(), g.data(), &mut gcols, ckk, f, hw);
                let gx = col2im(&gcols, c, h, wd, k);
                let bshape = self.shape(*b).to_vec();
                acc(adj, *b, Tensor::new(bshape, gb).expect("shape"));
                acc(adj, *w, gw);
                acc(adj, *x, gx);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                for (gv, &at) in g.data().iter().zip(argmax) {
                    gx.data_mut()[at] += gv;
                }
                acc(adj, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = g.reshaped(self.shape(*x)).expect("shape");
                acc(adj, *x, gx);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                acc(adj, *x, Tensor::full(self.shape(*x), s));
            }
            Op::SoftmaxXent {
                logits,
                label,
                probs,
            } => {
                let s = g.data()[0];
                let mut gl = probs.clone();
                gl[*label] -= 1.0;
                gl.iter_mut().for_each(|v| *v *= s);
                let shape = self.shape(*logits).to_vec();
                acc(adj, *logits, Tensor::new(shape, gl).expect("shape"));
            }
        }
    }
}

fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reshape_like(g: Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        g
    } else {
        g.reshaped(like.shape()).expect("same length")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    xs.iter_mut().for_each(|x| *x /= z);
}

/// `[C, H, W]` → `[C·k·k, H·W]` patch matrix with zero padding `k/2`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Tensor {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * hw;
                for i in 0..h {
                    let si = i as isize + ki as isize - pad;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + kj as isize - pad;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        cols[base + i * w + j] = x[ci * hw + si as usize * w + sj as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * k * k, hw], cols).expect("im2col shape")
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Tensor {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let base = ((ci * k + ki) * k + kj) * hw;
                for i in 0..h {
                    let si = i as isize + ki as isize - pad;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + kj as isize - pad;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        x[ci * hw + si as usize * w + sj as usize] += cols[base + i * w + j];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], x).expect("col2im shape")
}
