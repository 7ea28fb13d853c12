//! Define-by-run reverse-mode autodiff.
//!
//! Operations append nodes to a [`Graph`]; node order is already a valid
//! topological order, so the backward pass is a single reverse sweep that
//! accumulates each node's gradient exactly once. A graph and its tensors
//! stay on one thread between recording and backward.

use crate::error::{CoreError, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Abs(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Silu(NodeId),
    MatMul(NodeId, NodeId),
    /// A · Bᵀ with B stored (n × k).
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    /// Matrix plus a broadcast row vector.
    AddRow(NodeId, NodeId),
    /// Matrix times a broadcast row vector.
    MulRow(NodeId, NodeId),
    Narrow { x: NodeId, dim: usize, start: usize, len: usize },
    Concat { xs: Vec<NodeId>, dim: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Row-wise softmax of a rank-2 tensor.
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: Option<NodeId>, beta: Option<NodeId>, stats: Vec<(T, T)> },
    GroupNorm {
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        groups: usize,
        stats: Vec<(T, T)>,
    },
    Conv1d { x: NodeId, w: NodeId, stride: usize, pad: usize, groups: usize },
    ConvTranspose1d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    /// Nearest-neighbor temporal upsampling: each row repeated `factor` times.
    UpsampleRows { x: NodeId, factor: usize },
    /// Select rows by index (embedding lookup / masked-position gather).
    GatherRows { x: NodeId, rows: Vec<usize> },
    /// Mean negative log-likelihood of integer labels under row softmax.
    CrossEntropy { logits: NodeId, probs: Vec<T>, labels: Vec<usize> },
    /// CTC negative log-likelihood; gradient w.r.t. logits computed at forward.
    Ctc { logits: NodeId, grad_logits: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradient map produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root w.r.t. `id`, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of the root w.r.t. `id`; zero-filled when unreachable.
    pub fn of(&self, id: NodeId, graph: &Graph<T>) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(id).shape().to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor; participates in gradients when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        let needs = value.requires_grad;
        self.push(value, Op::Leaf, needs)
    }

    /// Insert a tensor that never receives gradient.
    pub fn constant(&mut self, mut value: Tensor<T>) -> NodeId {
        value.requires_grad = false;
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn zip_same(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_same(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_same(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_same(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        let needs = self.needs(a);
        self.push(v, Op::Neg(a), needs)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let needs = self.needs(a);
        self.push(v, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let needs = self.needs(a);
        self.push(v, Op::AddScalar(a, c), needs)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.abs());
        let needs = self.needs(a);
        self.push(v, Op::Abs(a), needs)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.exp());
        let needs = self.needs(a);
        self.push(v, Op::Exp(a), needs)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.ln());
        let needs = self.needs(a);
        self.push(v, Op::Ln(a), needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid_scalar);
        let needs = self.needs(a);
        self.push(v, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        let needs = self.needs(a);
        self.push(v, Op::Tanh(a), needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu_scalar);
        let needs = self.needs(a);
        self.push(v, Op::Gelu(a), needs)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid_scalar(x));
        let needs = self.needs(a);
        self.push(v, Op::Silu(a), needs)
    }

    // ── Linear algebra / shape ──────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = linalg::matmul(self.value(a), self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), needs)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = linalg::matmul_nt(self.value(a), self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulNT(a, b), needs)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[j * m + i] = ta.at2(i, j);
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::Transpose(a), needs)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(a).reshaped(shape).expect("reshape numel");
        let needs = self.needs(a);
        self.push(v, Op::Reshape(a), needs)
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (tx, tr) = (self.value(x), self.value(row));
        let (t, d) = tx.dims2();
        assert_eq!(tr.numel(), d, "add_row width mismatch");
        let mut out = tx.clone();
        out.requires_grad = false;
        for ti in 0..t {
            for (o, r) in out.row_mut(ti).iter_mut().zip(tr.data()) {
                *o += *r;
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push(out, Op::AddRow(x, row), needs)
    }

    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (tx, tr) = (self.value(x), self.value(row));
        let (t, d) = tx.dims2();
        assert_eq!(tr.numel(), d, "mul_row width mismatch");
        let mut out = tx.clone();
        out.requires_grad = false;
        for ti in 0..t {
            for (o, r) in out.row_mut(ti).iter_mut().zip(tr.data()) {
                *o = *o * *r;
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push(out, Op::MulRow(x, row), needs)
    }

    /// Contiguous slice along `dim` (rank 1 or 2).
    pub fn narrow(&mut self, x: NodeId, dim: usize, start: usize, len: usize) -> NodeId {
        let tx = self.value(x);
        let out = match tx.rank() {
            1 => {
                assert_eq!(dim, 0);
                assert!(start + len <= tx.numel());
                Tensor::from_vec(vec![len], tx.data()[start..start + len].to_vec())
            }
            2 => {
                let (t, d) = tx.dims2();
                match dim {
                    0 => {
                        assert!(start + len <= t);
                        Tensor::from_vec(
                            vec![len, d],
                            tx.data()[start * d..(start + len) * d].to_vec(),
                        )
                    }
                    1 => {
                        assert!(start + len <= d);
                        let mut data = Vec::with_capacity(t * len);
                        for ti in 0..t {
                            data.extend_from_slice(&tx.row(ti)[start..start + len]);
                        }
                        Tensor::from_vec(vec![t, len], data)
                    }
                    _ => panic!("narrow: dim {dim} out of range"),
                }
            }
            r => panic!("narrow supports rank 1/2, got {r}"),
        };
        let needs = self.needs(x);
        self.push(out, Op::Narrow { x, dim, start, len }, needs)
    }

    /// Concatenate along `dim` (rank 1 or 2).
    pub fn concat(&mut self, xs: &[NodeId], dim: usize) -> NodeId {
        assert!(!xs.is_empty());
        let rank = self.value(xs[0]).rank();
        let out = match (rank, dim) {
            (1, 0) => {
                let mut data = Vec::new();
                for &x in xs {
                    data.extend_from_slice(self.data(x));
                }
                Tensor::from_vec(vec![data.len()], data)
            }
            (2, 0) => {
                let d = self.value(xs[0]).dims2().1;
                let mut data = Vec::new();
                let mut rows = 0;
                for &x in xs {
                    let (t, dx) = self.value(x).dims2();
                    assert_eq!(dx, d, "concat dim-0 width mismatch");
                    rows += t;
                    data.extend_from_slice(self.data(x));
                }
                Tensor::from_vec(vec![rows, d], data)
            }
            (2, 1) => {
                let t = self.value(xs[0]).dims2().0;
                let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).dims2().1).collect();
                for &x in xs {
                    assert_eq!(self.value(x).dims2().0, t, "concat dim-1 height mismatch");
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(t * total);
                for ti in 0..t {
                    for &x in xs {
                        data.extend_from_slice(self.value(x).row(ti));
                    }
                }
                Tensor::from_vec(vec![t, total], data)
            }
            _ => panic!("concat supports rank 1/2, dim 0/1"),
        };
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(out, Op::Concat { xs: xs.to_vec(), dim }, needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: T = self.data(a).iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        assert!(n > 0, "mean of empty tensor");
        let s: T = self.data(a).iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s / T::f(n as f64)), Op::MeanAll(a), needs)
    }

    // ── Normalization / softmax ─────────────────────────────────────

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (t, d) = ta.dims2();
        let mut out = Tensor::zeros(vec![t, d]);
        for ti in 0..t {
            softmax_row(ta.row(ti), out.row_mut(ti));
        }
        let needs = self.needs(a);
        self.push(out, Op::Softmax(a), needs)
    }

    /// Row-wise layer normalization with optional per-column affine.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        eps: f64,
    ) -> NodeId {
        let tx = self.value(x);
        let (t, d) = tx.dims2();
        if let Some(g) = gamma {
            assert_eq!(self.value(g).numel(), d, "layer_norm gamma width");
        }
        if let Some(b) = beta {
            assert_eq!(self.value(b).numel(), d, "layer_norm beta width");
        }
        let mut out = Tensor::zeros(vec![t, d]);
        let mut stats = Vec::with_capacity(t);
        let inv_d = T::f(1.0 / d as f64);
        for ti in 0..t {
            let row = tx.row(ti);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = (var + T::f(eps)).sqrt().recip();
            stats.push((mean, rstd));
            let orow = out.row_mut(ti);
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mean) * rstd;
            }
        }
        if let Some(g) = gamma {
            let gd = self.data(g).to_vec();
            for ti in 0..t {
                for (o, gv) in out.row_mut(ti).iter_mut().zip(&gd) {
                    *o = *o * *gv;
                }
            }
        }
        if let Some(b) = beta {
            let bd = self.data(b).to_vec();
            for ti in 0..t {
                for (o, bv) in out.row_mut(ti).iter_mut().zip(&bd) {
                    *o += *bv;
                }
            }
        }
        let needs = self.needs(x)
            || gamma.map(|g| self.needs(g)).unwrap_or(false)
            || beta.map(|b| self.needs(b)).unwrap_or(false);
        self.push(out, Op::LayerNorm { x, gamma, beta, stats }, needs)
    }

    /// Group normalization over (rows × channels-per-group) with optional
    /// per-channel affine; matches conv-style group norm on a (T × C) map.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        groups: usize,
        eps: f64,
    ) -> NodeId {
        let tx = self.value(x);
        let (t, c) = tx.dims2();
        assert!(groups >= 1 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        let cg = c / groups;
        let m = T::f((t * cg) as f64);
        let mut out = Tensor::zeros(vec![t, c]);
        let mut stats = Vec::with_capacity(groups);
        for gi in 0..groups {
            let cols = gi * cg..(gi + 1) * cg;
            let mut sum = T::zero();
            for ti in 0..t {
                for &v in &tx.row(ti)[cols.clone()] {
                    sum += v;
                }
            }
            let mean = sum / m;
            let mut var = T::zero();
            for ti in 0..t {
                for &v in &tx.row(ti)[cols.clone()] {
                    var += (v - mean) * (v - mean);
                }
            }
            let rstd = (var / m + T::f(eps)).sqrt().recip();
            stats.push((mean, rstd));
            for ti in 0..t {
                let xr = tx.row(ti);
                for ci in cols.clone() {
                    out.data_mut()[ti * c + ci] = (xr[ci] - mean) * rstd;
                }
            }
        }
        if let Some(g) = gamma {
            assert_eq!(self.value(g).numel(), c);
            let gd = self.data(g).to_vec();
            for ti in 0..t {
                for (o, gv) in out.row_mut(ti).iter_mut().zip(&gd) {
                    *o = *o * *gv;
                }
            }
        }
        if let Some(b) = beta {
            assert_eq!(self.value(b).numel(), c);
            let bd = self.data(b).to_vec();
            for ti in 0..t {
                for (o, bv) in out.row_mut(ti).iter_mut().zip(&bd) {
                    *o += *bv;
                }
            }
        }
        let needs = self.needs(x)
            || gamma.map(|g| self.needs(g)).unwrap_or(false)
            || beta.map(|b| self.needs(b)).unwrap_or(false);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, needs)
    }

    // ── Convolution / gather ────────────────────────────────────────

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize, groups: usize) -> NodeId {
        let v = linalg::conv1d_forward(self.value(x), self.value(w), stride, pad, groups);
        let needs = self.needs(x) || self.needs(w);
        self.push(v, Op::Conv1d { x, w, stride, pad, groups }, needs)
    }

    pub fn conv_transpose1d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = linalg::conv_transpose1d_forward(self.value(x), self.value(w), stride, pad);
        let needs = self.needs(x) || self.needs(w);
        self.push(v, Op::ConvTranspose1d { x, w, stride, pad }, needs)
    }

    pub fn upsample_rows(&mut self, x: NodeId, factor: usize) -> NodeId {
        assert!(factor >= 1);
        let tx = self.value(x);
        let (t, d) = tx.dims2();
        let mut data = Vec::with_capacity(t * factor * d);
        for ti in 0..t {
            for _ in 0..factor {
                data.extend_from_slice(tx.row(ti));
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(vec![t * factor, d], data),
            Op::UpsampleRows { x, factor },
            needs,
        )
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let tx = self.value(x);
        let (t, d) = tx.dims2();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            assert!(r < t, "gather_rows: row {r} out of {t}");
            data.extend_from_slice(tx.row(r));
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(vec![rows.len(), d], data), Op::GatherRows { x, rows }, needs)
    }

    // ── Losses ──────────────────────────────────────────────────────

    /// Mean cross-entropy of integer labels under row-wise softmax of logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        let tl = self.value(logits);
        let (t, v) = tl.dims2();
        assert_eq!(labels.len(), t, "one label per logit row");
        let mut probs = vec![T::zero(); t * v];
        let mut loss = T::zero();
        for ti in 0..t {
            let row = tl.row(ti);
            assert!(labels[ti] < v, "label out of range");
            let prow = &mut probs[ti * v..(ti + 1) * v];
            let lse = softmax_row(row, prow);
            loss += lse - row[labels[ti]];
        }
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss / T::f(t as f64)),
            Op::CrossEntropy { logits, probs, labels },
            needs,
        )
    }

    /// CTC negative log-likelihood over logits (T × V+1) with the blank at
    /// index V. Loss and logit gradient come from the forward/backward lattice
    /// recursions in log space.
    pub fn ctc_loss(&mut self, logits: NodeId, targets: &[usize], blank: usize) -> Result<NodeId> {
        let tl = self.value(logits);
        let (t_len, n_class) = tl.dims2();
        assert_eq!(blank, n_class - 1, "blank sits at the last index");
        for &y in targets {
            if y >= blank {
                return Err(CoreError::Ctc(format!(
                    "target symbol {y} outside vocabulary of {blank}"
                )));
            }
        }
        let min_frames =
            targets.len() + targets.windows(2).filter(|w| w[0] == w[1]).count();
        if t_len < min_frames {
            return Err(CoreError::Ctc(format!(
                "transcript needs at least {min_frames} frames, input has {t_len}"
            )));
        }

        let (loss, grad) = ctc_forward_backward(tl.data(), t_len, n_class, targets, blank);
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::Ctc { logits, grad_logits: grad }, needs))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Every reachable differentiable leaf
    /// receives d(root)/d(leaf); unreachable leaves read as zero via
    /// [`Gradients::of`].
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(CoreError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), T::one()));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.accumulate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, idx: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, gout.clone());
                self.add_grad(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, gout.clone());
                self.add_grad(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let d = gout.data().iter().zip(db).map(|(&g, &y)| g * y).collect();
                    self.add_grad(grads, *a, Tensor::from_vec(gout.shape().to_vec(), d));
                }
                if self.needs(*b) {
                    let d = gout.data().iter().zip(da).map(|(&g, &x)| g * x).collect();
                    self.add_grad(grads, *b, Tensor::from_vec(gout.shape().to_vec(), d));
                }
            }
            Op::Neg(a) => self.add_grad(grads, *a, gout.map(|v| -v)),
            Op::Scale(a, c) => {
                let c = *c;
                self.add_grad(grads, *a, gout.map(|v| v * c));
            }
            Op::AddScalar(a, _) => self.add_grad(grads, *a, gout.clone()),
            Op::Abs(a) => {
                let d = self
                    .data(*a)
                    .iter()
                    .zip(gout.data())
                    .map(|(&x, &g)| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.add_grad(grads, *a, Tensor::from_vec(gout.shape().to_vec(), d));
            }
            Op::Exp(a) => {
                let out = &self.nodes[idx].value;
                let d = out.data().iter().zip(gout.data()).map(|(&y, &g)| g * y).collect();
                self.add_grad(grads, *a, Tensor::from_vec(gout.shape().to_vec(), d));
            }
            Op::Ln(a) => {
                let d = self.data(*a).iter().zip(gout.data()).map(|(&x, &g)| g / x).collect();
                self.add_grad(grads, *a, Tensor::from_vec(gout.shape().to_vec(), d));
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[idx].value;
                let d = out
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                self.add_grad(grads, *a, Tensor::from_vec(gout.shape().to_vec(), d));
            }
            Op::Tanh(a) => {
                let out = &self.nodes[idx].value;
                let d = out
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&y, &g)| g * (T::one() - y * y))
                    .collect();
                self.add_grad(grads, *a, Tensor::from_vec(gout.shape().to_vec(), d));
            }
            Op::Gelu(a) => {
                let d = self
                    .data(*a)
                    .iter()
                    .zip(gout.data())
                    .map(|(&x, &g)| g * gelu_grad_scalar(x))
                    .collect();
                self.add_grad(grads, *a, Tensor::from_vec(gout.shape().to_vec(), d));
            }
            Op::Silu(a) => {
                let d = self
                    .data(*a)
                    .iter()
                    .zip(gout.data())
                    .map(|(&x, &g)| {
                        let s = sigmoid_scalar(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.add_grad(grads, *a, Tensor::from_vec(gout.shape().to_vec(), d));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let mut ga = Tensor::zeros(vec![m, k]);
                    linalg::gemm_into(
                        ga.data_mut(),
                        m,
                        n,
                        k,
                        gout.data(),
                        false,
                        self.data(*b),
                        true,
                        T::one(),
                        T::zero(),
                    );
                    self.add_grad(grads, *a, ga);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let mut gb = Tensor::zeros(vec![k, n]);
                    linalg::gemm_into(
                        gb.data_mut(),
                        k,
                        m,
                        n,
                        self.data(*a),
                        true,
                        gout.data(),
                        false,
                        T::one(),
                        T::zero(),
                    );
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().0;
                if self.needs(*a) {
                    // dA = dC · B
                    let mut ga = Tensor::zeros(vec![m, k]);
                    linalg::gemm_into(
                        ga.data_mut(),
                        m,
                        n,
                        k,
                        gout.data(),
                        false,
                        self.data(*b),
                        false,
                        T::one(),
                        T::zero(),
                    );
                    self.add_grad(grads, *a, ga);
                }
                if self.needs(*b) {
                    // dB = dCᵀ · A
                    let mut gb = Tensor::zeros(vec![n, k]);
                    linalg::gemm_into(
                        gb.data_mut(),
                        n,
                        m,
                        k,
                        gout.data(),
                        true,
                        self.data(*a),
                        false,
                        T::one(),
                        T::zero(),
                    );
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = self.nodes[idx].value.dims2();
                let mut g = Tensor::zeros(vec![m, n]);
                for i in 0..n {
                    for j in 0..m {
                        g.data_mut()[j * n + i] = gout.at2(i, j);
                    }
                }
                self.add_grad(grads, *a, g);
            }
            Op::Reshape(a) => {
                let g = gout.reshaped(self.value(*a).shape().to_vec()).expect("reshape grad");
                self.add_grad(grads, *a, g);
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    self.add_grad(grads, *x, gout.clone());
                }
                if self.needs(*row) {
                    let (t, d) = gout.dims2();
                    let mut g = Tensor::zeros(self.value(*row).shape().to_vec());
                    for ti in 0..t {
                        for (gv, &go) in g.data_mut().iter_mut().zip(gout.row(ti)) {
                            *gv += go;
                        }
                    }
                    let _ = (t, d);
                    self.add_grad(grads, *row, g);
                }
            }
            Op::MulRow(x, row) => {
                let (t, d) = gout.dims2();
                if self.needs(*x) {
                    let rd = self.data(*row);
                    let mut g = Tensor::zeros(vec![t, d]);
                    for ti in 0..t {
                        for ci in 0..d {
                            g.data_mut()[ti * d + ci] = gout.at2(ti, ci) * rd[ci];
                        }
                    }
                    self.add_grad(grads, *x, g);
                }
                if self.needs(*row) {
                    let xd = self.value(*x);
                    let mut g = Tensor::zeros(self.value(*row).shape().to_vec());
                    for ti in 0..t {
                        for ci in 0..d {
                            g.data_mut()[ci] += gout.at2(ti, ci) * xd.at2(ti, ci);
                        }
                    }
                    self.add_grad(grads, *row, g);
                }
            }
            Op::Narrow { x, dim, start, len } => {
                let tx = self.value(*x);
                let mut g = Tensor::zeros(tx.shape().to_vec());
                match (tx.rank(), *dim) {
                    (1, 0) => {
                        g.data_mut()[*start..start + len].copy_from_slice(gout.data());
                    }
                    (2, 0) => {
                        let d = tx.dims2().1;
                        g.data_mut()[start * d..(start + len) * d].copy_from_slice(gout.data());
                    }
                    (2, 1) => {
                        let (t, d) = tx.dims2();
                        for ti in 0..t {
                            g.data_mut()[ti * d + start..ti * d + start + len]
                                .copy_from_slice(gout.row(ti));
                        }
                    }
                    _ => unreachable!(),
                }
                self.add_grad(grads, *x, g);
            }
            Op::Concat { xs, dim } => {
                let rank = self.value(xs[0]).rank();
                match (rank, *dim) {
                    (1, 0) | (2, 0) => {
                        let mut offset = 0;
                        for &x in xs {
                            let n = self.value(x).numel();
                            if self.needs(x) {
                                let g = Tensor::from_vec(
                                    self.value(x).shape().to_vec(),
                                    gout.data()[offset..offset + n].to_vec(),
                                );
                                self.add_grad(grads, x, g);
                            }
                            offset += n;
                        }
                    }
                    (2, 1) => {
                        let t = self.value(xs[0]).dims2().0;
                        let mut col = 0;
                        for &x in xs {
                            let w = self.value(x).dims2().1;
                            if self.needs(x) {
                                let mut data = Vec::with_capacity(t * w);
                                for ti in 0..t {
                                    data.extend_from_slice(&gout.row(ti)[col..col + w]);
                                }
                                self.add_grad(grads, x, Tensor::from_vec(vec![t, w], data));
                            }
                            col += w;
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::SumAll(a) => {
                let g = gout.item();
                self.add_grad(grads, *a, Tensor::full(self.value(*a).shape().to_vec(), g));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let g = gout.item() / T::f(n as f64);
                self.add_grad(grads, *a, Tensor::full(self.value(*a).shape().to_vec(), g));
            }
            Op::Softmax(a) => {
                let out = &self.nodes[idx].value;
                let (t, d) = out.dims2();
                let mut g = Tensor::zeros(vec![t, d]);
                for ti in 0..t {
                    let y = out.row(ti);
                    let go = gout.row(ti);
                    let dot: T = y.iter().zip(go).map(|(&yv, &gv)| yv * gv).sum();
                    for ci in 0..d {
                        g.data_mut()[ti * d + ci] = y[ci] * (go[ci] - dot);
                    }
                }
                self.add_grad(grads, *a, g);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let tx = self.value(*x);
                let (t, d) = tx.dims2();
                let gam: Option<&[T]> = gamma.map(|g| self.data(g));
                let inv_d = T::f(1.0 / d as f64);
                let mut gx = Tensor::zeros(vec![t, d]);
                let mut ggamma = gamma.map(|_| Tensor::zeros(vec![d]));
                let mut gbeta = beta.map(|_| Tensor::zeros(vec![d]));
                for ti in 0..t {
                    let (mean, rstd) = stats[ti];
                    let xr = tx.row(ti);
                    let go = gout.row(ti);
                    // dy = gout * gamma; accumulate affine grads against y.
                    let mut dy = vec![T::zero(); d];
                    for ci in 0..d {
                        let y = (xr[ci] - mean) * rstd;
                        if let Some(gg) = &mut ggamma {
                            gg.data_mut()[ci] += go[ci] * y;
                        }
                        if let Some(gb) = &mut gbeta {
                            gb.data_mut()[ci] += go[ci];
                        }
                        dy[ci] = match gam {
                            Some(g) => go[ci] * g[ci],
                            None => go[ci],
                        };
                    }
                    let mean_dy: T = dy.iter().copied().sum::<T>() * inv_d;
                    let mean_dyy: T = dy
                        .iter()
                        .enumerate()
                        .map(|(ci, &v)| v * (xr[ci] - mean) * rstd)
                        .sum::<T>()
                        * inv_d;
                    for ci in 0..d {
                        let y = (xr[ci] - mean) * rstd;
                        gx.data_mut()[ti * d + ci] = rstd * (dy[ci] - mean_dy - y * mean_dyy);
                    }
                }
                self.add_grad(grads, *x, gx);
                if let (Some(g), Some(id)) = (ggamma, *gamma) {
                    self.add_grad(grads, id, g);
                }
                if let (Some(g), Some(id)) = (gbeta, *beta) {
                    self.add_grad(grads, id, g);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let tx = self.value(*x);
                let (t, c) = tx.dims2();
                let cg = c / groups;
                let m = T::f((t * cg) as f64);
                let gam: Option<&[T]> = gamma.map(|g| self.data(g));
                let mut gx = Tensor::zeros(vec![t, c]);
                let mut ggamma = gamma.map(|_| Tensor::zeros(vec![c]));
                let mut gbeta = beta.map(|_| Tensor::zeros(vec![c]));
                for gi in 0..*groups {
                    let (mean, rstd) = stats[gi];
                    let cols = gi * cg..(gi + 1) * cg;
                    let mut sum_dy = T::zero();
                    let mut sum_dyy = T::zero();
                    for ti in 0..t {
                        let xr = tx.row(ti);
                        let go = gout.row(ti);
                        for ci in cols.clone() {
                            let y = (xr[ci] - mean) * rstd;
                            if let Some(gg) = &mut ggamma {
                                gg.data_mut()[ci] += go[ci] * y;
                            }
                            if let Some(gb) = &mut gbeta {
                                gb.data_mut()[ci] += go[ci];
                            }
                            let dy = match gam {
                                Some(g) => go[ci] * g[ci],
                                None => go[ci],
                            };
                            sum_dy += dy;
                            sum_dyy += dy * y;
                        }
                    }
                    let mean_dy = sum_dy / m;
                    let mean_dyy = sum_dyy / m;
                    for ti in 0..t {
                        let xr = tx.row(ti);
                        let go = gout.row(ti);
                        for ci in cols.clone() {
                            let y = (xr[ci] - mean) * rstd;
                            let dy = match gam {
                                Some(g) => go[ci] * g[ci],
                                None => go[ci],
                            };
                            gx.data_mut()[ti * c + ci] = rstd * (dy - mean_dy - y * mean_dyy);
                        }
                    }
                }
                self.add_grad(grads, *x, gx);
                if let (Some(g), Some(id)) = (ggamma, *gamma) {
                    self.add_grad(grads, id, g);
                }
                if let (Some(g), Some(id)) = (gbeta, *beta) {
                    self.add_grad(grads, id, g);
                }
            }
            Op::Conv1d { x, w, stride, pad, groups } => {
                let (gx, gw) =
                    linalg::conv1d_backward(self.value(*x), self.value(*w), gout, *stride, *pad, *groups);
                if self.needs(*x) {
                    self.add_grad(grads, *x, gx);
                }
                if self.needs(*w) {
                    self.add_grad(grads, *w, gw);
                }
            }
            Op::ConvTranspose1d { x, w, stride, pad } => {
                let (gx, gw) =
                    linalg::conv_transpose1d_backward(self.value(*x), self.value(*w), gout, *stride, *pad);
                if self.needs(*x) {
                    self.add_grad(grads, *x, gx);
                }
                if self.needs(*w) {
                    self.add_grad(grads, *w, gw);
                }
            }
            Op::UpsampleRows { x, factor } => {
                let (t, d) = self.value(*x).dims2();
                let mut g = Tensor::zeros(vec![t, d]);
                for ti in 0..t {
                    for fi in 0..*factor {
                        let src = gout.row(ti * factor + fi);
                        for (gv, &sv) in g.row_mut(ti).iter_mut().zip(src) {
                            *gv += sv;
                        }
                    }
                }
                self.add_grad(grads, *x, g);
            }
            Op::GatherRows { x, rows } => {
                let (t, d) = self.value(*x).dims2();
                let mut g = Tensor::zeros(vec![t, d]);
                for (oi, &r) in rows.iter().enumerate() {
                    let src = gout.row(oi);
                    for (gv, &sv) in g.row_mut(r).iter_mut().zip(src) {
                        *gv += sv;
                    }
                }
                self.add_grad(grads, *x, g);
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let (t, v) = self.value(*logits).dims2();
                let scale = gout.item() / T::f(t as f64);
                let mut g = Tensor::zeros(vec![t, v]);
                for ti in 0..t {
                    for ci in 0..v {
                        let p = probs[ti * v + ci];
                        let onehot = if labels[ti] == ci { T::one() } else { T::zero() };
                        g.data_mut()[ti * v + ci] = scale * (p - onehot);
                    }
                }
                self.add_grad(grads, *logits, g);
            }
            Op::Ctc { logits, grad_logits } => {
                let scale = gout.item();
                let shape = self.value(*logits).shape().to_vec();
                let data = grad_logits.iter().map(|&g| g * scale).collect();
                self.add_grad(grads, *logits, Tensor::from_vec(shape, data));
            }
        }
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// tanh-form GELU.
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::f(0.7978845608028654); // sqrt(2/pi)
    let k = T::f(0.044715);
    let u = c * (x + k * x * x * x);
    T::f(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::f(0.7978845608028654);
    let k = T::f(0.044715);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let sech2 = T::one() - th * th;
    let du = c * (T::one() + T::f(3.0) * k * x * x);
    T::f(0.5) * (T::one() + th) + T::f(0.5) * x * sech2 * du
}

/// Fills `out` with softmax(row) and returns logsumexp(row).
fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    sum.ln() + max
}

fn log_sum_exp<T: Scalar>(vals: &[T]) -> T {
    let max = vals.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return T::neg_infinity();
    }
    let sum: T = vals.iter().map(|&v| (v - max).exp()).sum();
    sum.ln() + max
}

/// Forward/backward lattice recursions for CTC in log space; returns the
/// negative log-likelihood and its gradient w.r.t. the raw logits.
fn ctc_forward_backward<T: Scalar>(
    logits: &[T],
    t_len: usize,
    n_class: usize,
    targets: &[usize],
    blank: usize,
) -> (T, Vec<T>) {
    let s_len = 2 * targets.len() + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            targets[s / 2]
        }
    };
    let ninf = T::neg_infinity();

    // Row log-softmax and probabilities.
    let mut lp = vec![T::zero(); t_len * n_class];
    let mut probs = vec![T::zero(); t_len * n_class];
    for t in 0..t_len {
        let row = &logits[t * n_class..(t + 1) * n_class];
        let prow = &mut probs[t * n_class..(t + 1) * n_class];
        let lse = softmax_row(row, prow);
        for c in 0..n_class {
            lp[t * n_class + c] = row[c] - lse;
        }
    }
    let lp_at = |t: usize, s: usize| lp[t * n_class + ext(s)];

    // Alpha: paths consuming frames 0..=t ending at lattice position s.
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp_at(0, 0);
    if s_len > 1 {
        alpha[1] = lp_at(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = alpha[(t - 1) * s_len + s];
            let diag = if s >= 1 { alpha[(t - 1) * s_len + s - 1] } else { ninf };
            let skip = if s >= 2 && ext(s) != blank && ext(s) != ext(s - 2) {
                alpha[(t - 1) * s_len + s - 2]
            } else {
                ninf
            };
            let acc = log_sum_exp(&[stay, diag, skip]);
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp_at(t, s) };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        log_sum_exp(&[alpha[last + s_len - 1], alpha[last + s_len - 2]])
    } else {
        alpha[last + s_len - 1]
    };
    let loss = -log_p;

    // Beta: paths consuming frames t..t_len-1 starting at s (includes frame t).
    let mut beta = vec![ninf; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = lp_at(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = lp_at(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in (0..s_len).rev() {
            let stay = beta[(t + 1) * s_len + s];
            let diag = if s + 1 < s_len { beta[(t + 1) * s_len + s + 1] } else { ninf };
            let skip = if s + 2 < s_len && ext(s + 2) != blank && ext(s + 2) != ext(s) {
                beta[(t + 1) * s_len + s + 2]
            } else {
                ninf
            };
            let acc = log_sum_exp(&[stay, diag, skip]);
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp_at(t, s) };
        }
    }

    // dL/d lp[t,k] = -(1/P) Σ_{s: ext(s)=k} exp(α + β − lp[t,k]); both α and β
    // include frame t once, so one copy is divided back out.
    let mut dlp = vec![T::zero(); t_len * n_class];
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let k = ext(s);
            let contrib = (a + b - lp[t * n_class + k] - log_p).exp();
            dlp[t * n_class + k] -= contrib;
        }
    }
    // Chain through log-softmax: dlogit_j = dlp_j − p_j · Σ_k dlp_k.
    let mut grad = vec![T::zero(); t_len * n_class];
    for t in 0..t_len {
        let row_sum: T = dlp[t * n_class..(t + 1) * n_class].iter().copied().sum();
        for c in 0..n_class {
            grad[t * n_class + c] = dlp[t * n_class + c] - probs[t * n_class + c] * row_sum;
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 5.0]).with_grad());
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).with_grad());
        let sq = g.mul(x, x);
        let s = g.sum_all(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(x), Err(CoreError::NonScalarRoot(_))));
    }

    #[test]
    fn unreachable_leaf_reads_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).with_grad());
        let y = g.leaf(Tensor::from_vec(vec![2], vec![3.0, 4.0]).with_grad());
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.of(y, &g).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_subexpression_accumulates_sum_of_paths() {
        // root = sum(h + h) where h = x*x, against an explicitly duplicated graph.
        let xv = Tensor::from_vec(vec![3], vec![0.5, -1.5, 2.0]);

        let mut g1 = Graph::<f64>::new();
        let x1 = g1.leaf(xv.clone().with_grad());
        let h = g1.mul(x1, x1);
        let both = g1.add(h, h);
        let root1 = g1.sum_all(both);
        let grads1 = g1.backward(root1).unwrap();

        let mut g2 = Graph::<f64>::new();
        let x2 = g2.leaf(xv.with_grad());
        let ha = g2.mul(x2, x2);
        let hb = g2.mul(x2, x2);
        let sum = g2.add(ha, hb);
        let root2 = g2.sum_all(sum);
        let grads2 = g2.backward(root2).unwrap();

        assert_eq!(grads1.get(x1).unwrap().data(), grads2.get(x2).unwrap().data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(vec![2, 3], vec![0.1, 2.0, -1.0, 5.0, 5.0, 5.0]));
        let s = g.softmax(x);
        for ti in 0..2 {
            let sum: f64 = g.value(s).row(ti).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ctc_single_frame_uniform() {
        // T=1, one symbol, uniform logits over 3 classes: only one path, -ln(1/3).
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::zeros(vec![1, 3]).with_grad());
        let loss = g.ctc_loss(logits, &[0], 2).unwrap();
        assert!((g.value(loss).item() - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_empty_transcript_is_all_blank_path() {
        let mut g = Graph::<f64>::new();
        let raw = Tensor::from_vec(vec![2, 3], vec![0.2, -0.1, 1.0, -0.4, 0.3, 0.7]);
        let logits = g.leaf(raw.clone().with_grad());
        let loss = g.ctc_loss(logits, &[], 2).unwrap();
        let mut expected = 0.0;
        for t in 0..2 {
            let row = raw.row(t);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expected -= row[2] - lse;
        }
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn ctc_infeasible_transcript_errors() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::zeros(vec![2, 3]).with_grad());
        assert!(g.ctc_loss(logits, &[0, 0], 2).is_err()); // needs 3 frames
        let logits2 = g.leaf(Tensor::zeros(vec![2, 3]).with_grad());
        assert!(g.ctc_loss(logits2, &[0, 1, 0], 2).is_err());
    }

    #[test]
    fn ctc_rejects_out_of_vocab_symbol() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::zeros(vec![4, 3]).with_grad());
        assert!(g.ctc_loss(logits, &[2], 2).is_err());
    }
}
