//! Named parameter storage and the shared neural building blocks.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered name → tensor map holding a model's trainable state. Insertion
/// order is stable, which keeps checkpoints and optimizer sweeps
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) {
        let name = name.into();
        tensor.requires_grad = true;
        assert!(self.map.insert(name.clone(), tensor).is_none(), "duplicate param `{name}`");
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown param `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown param `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.insert(name.clone(), t.cast::<U>());
        }
        out
    }

    /// Insert every parameter into a graph as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let mut ids = IndexMap::new();
        for (name, tensor) in &self.map {
            let mut t = tensor.clone();
            t.requires_grad = true;
            ids.insert(name.clone(), g.leaf(t));
        }
        Bound { ids }
    }
}

/// Node handles of a [`ParamStore`] bound into one graph.
pub struct Bound {
    ids: IndexMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound param `{name}`"))
    }

    /// Collect per-parameter gradients by name (zeros when unreached).
    pub fn grads<T: Scalar>(&self, g: &Graph<T>, grads: &Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.ids.iter().map(|(name, &id)| (name.clone(), grads.of(id, g))).collect()
    }
}

// ── Initializers ────────────────────────────────────────────────────

/// Xavier/Glorot uniform for a (fan_in × fan_out) weight.
pub fn xavier_uniform<T: Scalar, R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(vec![fan_in, fan_out], -bound, bound, rng)
}

/// Kaiming-style uniform for conv weights of arbitrary shape with a given fan-in.
pub fn kaiming_uniform<T: Scalar, R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

pub fn normal_init<T: Scalar, R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<T> {
    let mut t = Tensor::randn(shape, rng);
    for v in t.data_mut() {
        *v = *v * T::f(std);
    }
    t
}

// ── Composite blocks ────────────────────────────────────────────────

/// x·W + b.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
    let y = g.matmul(x, w);
    match b {
        Some(b) => g.add_row(y, b),
        None => y,
    }
}

/// Registers a linear layer's parameters under `{prefix}.w` / `{prefix}.b`.
pub fn linear_init<T: Scalar, R: Rng>(
    params: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    params.insert(format!("{prefix}.w"), xavier_uniform(fan_in, fan_out, rng));
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]));
}

/// Apply a registered linear layer.
pub fn linear_apply<T: Scalar>(g: &mut Graph<T>, bound: &Bound, prefix: &str, x: NodeId) -> NodeId {
    linear(g, x, bound.id(&format!("{prefix}.w")), Some(bound.id(&format!("{prefix}.b"))))
}

/// Projection weights of one attention block.
pub struct AttnParams {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

impl AttnParams {
    pub fn init<T: Scalar, R: Rng>(params: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut R) {
        for name in ["q", "k", "v", "o"] {
            linear_init(params, &format!("{prefix}.{name}"), dim, dim, rng);
        }
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        AttnParams {
            wq: bound.id(&format!("{prefix}.q.w")),
            bq: bound.id(&format!("{prefix}.q.b")),
            wk: bound.id(&format!("{prefix}.k.w")),
            bk: bound.id(&format!("{prefix}.k.b")),
            wv: bound.id(&format!("{prefix}.v.w")),
            bv: bound.id(&format!("{prefix}.v.b")),
            wo: bound.id(&format!("{prefix}.o.w")),
            bo: bound.id(&format!("{prefix}.o.b")),
        }
    }
}

/// Scaled dot-product multi-head attention over (T × dim) sequences.
///
/// `mask`, when given, is added to every head's pre-softmax score matrix.
/// Returns the projected output; `multihead_attention_with_weights` also
/// exposes the per-head attention matrices.
pub fn multihead_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    p: &AttnParams,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    multihead_attention_with_weights(g, q, k, v, heads, p, mask).map(|(out, _)| out)
}

pub fn multihead_attention_with_weights<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    p: &AttnParams,
    mask: Option<NodeId>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let dim = g.shape(q)[1];
    if heads == 0 || dim % heads != 0 {
        return Err(CoreError::Shape(format!(
            "model dim {dim} not divisible by {heads} heads"
        )));
    }
    let dh = dim / heads;
    let scale = T::f(1.0 / (dh as f64).sqrt());

    let qp = linear(g, q, p.wq, Some(p.bq));
    let kp = linear(g, k, p.wk, Some(p.bk));
    let vp = linear(g, v, p.wv, Some(p.bv));

    let mut head_outs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(qp, 1, h * dh, dh);
        let kh = g.narrow(kp, 1, h * dh, dh);
        let vh = g.narrow(vp, 1, h * dh, dh);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let scores = match mask {
            Some(m) => g.add(scores, m),
            None => scores,
        };
        let attn = g.softmax(scores);
        head_weights.push(attn);
        head_outs.push(g.matmul(attn, vh));
    }
    let merged = g.concat(&head_outs, 1);
    Ok((linear(g, merged, p.wo, Some(p.bo)), head_weights))
}

/// Sinusoidal position table (T × dim), added to token sequences as a constant.
pub fn sinusoid_table<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(vec![len, dim]);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * freq;
            out.data_mut()[pos * dim + 2 * i] = T::f(angle.sin());
            if 2 * i + 1 < dim {
                out.data_mut()[pos * dim + 2 * i + 1] = T::f(angle.cos());
            }
        }
    }
    out
}

/// Mean absolute error of two same-shape nodes.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> NodeId {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean_all(d)
}

/// Mean squared error of two same-shape nodes.
pub fn mse_loss<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> NodeId {
    let d = g.sub(a, b);
    let d2 = g.mul(d, d);
    g.mean_all(d2)
}
