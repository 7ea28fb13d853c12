//! Flow-matching latent reconstruction: a DiT-style transformer predicts the
//! velocity transporting noise to mel-VAE latents along the linear path
//! x_t = (1−t)·x0 + t·x1 (noise at t=0, data at t=1, target u = x1 − x0),
//! conditioned per-frame on dequantized quantizer output. Sampling is Euler
//! integration with classifier-free guidance.

use std::path::Path;

use muc_core::{
    multihead_attention, sinusoid_table, AttnParams, Bound, Graph, NodeId, ParamStore, Scalar,
    Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};
use crate::model_io::{load_model, meta_config, save_model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub n_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    /// Group-norm groups on the latent input projection.
    pub norm_groups: usize,
    pub norm_eps: f64,
    /// Size of the learned timestep-embedding table.
    pub timestep_embeds: usize,
    pub latent_channels: usize,
    pub cond_dim: usize,
    pub max_frames: usize,
}

impl DitConfig {
    /// Desk-scale config.
    pub fn desk(latent_channels: usize, cond_dim: usize) -> Self {
        DitConfig {
            n_layers: 6,
            heads: 4,
            head_dim: 16,
            mlp_ratio: 4,
            norm_groups: 8,
            norm_eps: 1e-6,
            timestep_embeds: 1000,
            latent_channels,
            cond_dim,
            max_frames: 4096,
        }
    }

    /// Reference-scale geometry: 24 layers, head dim 72, 32 norm groups
    /// (selectable; CI never trains it).
    pub fn reference(latent_channels: usize, cond_dim: usize) -> Self {
        DitConfig {
            n_layers: 24,
            heads: 16,
            head_dim: 72,
            norm_groups: 32,
            ..Self::desk(latent_channels, cond_dim)
        }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels % self.norm_groups != 0 {
            return Err(CodecError::Config(format!(
                "{} latent channels not divisible into {} norm groups",
                self.latent_channels, self.norm_groups
            )));
        }
        if self.timestep_embeds < 2 {
            return Err(CodecError::Config("need at least 2 timestep embeddings".into()));
        }
        Ok(())
    }
}

/// Map continuous t ∈ [0,1] to a timestep-table index: floor(t·(N−1)).
pub fn timestep_index(t: f64, n_embeds: usize) -> usize {
    let idx = (t * (n_embeds - 1) as f64).floor();
    (idx.max(0.0) as usize).min(n_embeds - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { n_steps: 50, guidance_scale: 1.5, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 1 {
            return Err(CodecError::Config("sampler needs at least one step".into()));
        }
        if self.guidance_scale < 0.0 {
            return Err(CodecError::Config("guidance scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// One training example for the flow objective.
#[derive(Debug, Clone)]
pub struct FlowExample<T> {
    /// Data point (normalized latent).
    pub x1: Tensor<T>,
    /// Noise sample, same shape.
    pub x0: Tensor<T>,
    /// Path position in [0,1].
    pub t: f64,
    /// Per-frame condition; `None` trains the unconditional branch.
    pub cond: Option<Tensor<T>>,
}

/// Velocity model evaluated inside a graph (trainable path).
pub trait GraphVelocity<T: Scalar> {
    fn velocity_node(
        &self,
        g: &mut Graph<T>,
        x_t: NodeId,
        t: f64,
        cond: Option<NodeId>,
    ) -> NodeId;
}

/// Velocity model on plain tensors (sampling path).
pub trait Velocity<T: Scalar> {
    fn velocity(&self, x: &Tensor<T>, t: f64, cond: Option<&Tensor<T>>) -> Tensor<T>;
}

pub struct DitModel<T> {
    pub cfg: DitConfig,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    pub sampler_defaults: SamplerConfig,
}

impl<T: Scalar> DitModel<T> {
    pub fn new(cfg: DitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim();
        let c = cfg.latent_channels;
        let mut params = ParamStore::new();
        params.insert("in.norm.g", Tensor::full(vec![c], T::one()));
        params.insert("in.norm.b", Tensor::zeros(vec![c]));
        muc_core::linear_init(&mut params, "in.proj", c, d, &mut rng);
        muc_core::linear_init(&mut params, "cond.proj", cfg.cond_dim, d, &mut rng);
        params.insert("cond.null", muc_core::normal_init(vec![d], 0.02, &mut rng));
        params.insert(
            "time.table",
            muc_core::normal_init(vec![cfg.timestep_embeds, d], 0.02, &mut rng),
        );
        muc_core::linear_init(&mut params, "time.mod", d, 6 * d, &mut rng);
        for l in 0..cfg.n_layers {
            let p = format!("l{l}");
            params.insert(format!("{p}.mod.offset"), Tensor::zeros(vec![6 * d]));
            AttnParams::init(&mut params, &format!("{p}.attn"), d, &mut rng);
            muc_core::linear_init(&mut params, &format!("{p}.mlp.l1"), d, cfg.mlp_ratio * d, &mut rng);
            muc_core::linear_init(&mut params, &format!("{p}.mlp.l2"), cfg.mlp_ratio * d, d, &mut rng);
        }
        muc_core::linear_init(&mut params, "out.proj", d, c, &mut rng);
        let mut buffers = ParamStore::new();
        buffers.insert("pos", sinusoid_table(cfg.max_frames, d));
        Ok(DitModel { cfg, params, buffers, sampler_defaults: SamplerConfig::default() })
    }

    fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        let mut frozen = self.params.clone();
        for name in frozen.names().cloned().collect::<Vec<_>>() {
            frozen.get_mut(&name).requires_grad = false;
        }
        frozen.bind(g)
    }

    /// Full DiT forward: latent frames (T × C) and an optional 1:1 condition
    /// (T × cond_dim) to a velocity field (T × C). A missing condition uses
    /// the learned null embedding — exactly the unconditional branch.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x_t: NodeId,
        t: f64,
        cond: Option<NodeId>,
    ) -> NodeId {
        let cfg = &self.cfg;
        let d = cfg.model_dim();
        let (t_frames, c) = (g.shape(x_t)[0], g.shape(x_t)[1]);
        assert_eq!(c, cfg.latent_channels, "latent channel mismatch");
        assert!(t_frames <= cfg.max_frames, "sequence exceeds position table");
        if let Some(cid) = cond {
            let cs = g.shape(cid);
            assert_eq!(
                cs[0], t_frames,
                "condition frames {} must align 1:1 with latent frames {}",
                cs[0], t_frames
            );
            assert_eq!(cs[1], cfg.cond_dim, "condition dim mismatch");
        }

        // Latent tokens: group norm over channels, then projection.
        let xn = g.group_norm(
            x_t,
            Some(bound.id("in.norm.g")),
            Some(bound.id("in.norm.b")),
            cfg.norm_groups,
            cfg.norm_eps,
        );
        let mut tokens = muc_core::linear_apply(g, bound, "in.proj", xn);

        // Condition tokens added per frame; null embedding when dropped.
        let cond_tok = match cond {
            Some(cid) => muc_core::linear_apply(g, bound, "cond.proj", cid),
            None => {
                let zeros = g.constant(Tensor::zeros(vec![t_frames, d]));
                g.add_row(zeros, bound.id("cond.null"))
            }
        };
        tokens = g.add(tokens, cond_tok);

        let pos = {
            let table = self.buffers.get("pos");
            let data = table.data()[..t_frames * d].to_vec();
            g.constant(Tensor::from_vec(vec![t_frames, d], data))
        };
        tokens = g.add(tokens, pos);

        // Timestep modulation, shared across blocks with per-block offsets.
        let t_idx = timestep_index(t, cfg.timestep_embeds);
        let table = bound.id("time.table");
        let t_emb = g.gather_rows(table, vec![t_idx]);
        let t_emb = g.silu(t_emb);
        let t_mod = muc_core::linear_apply(g, bound, "time.mod", t_emb); // (1 × 6d)

        let mut x = tokens;
        for l in 0..cfg.n_layers {
            let p = format!("l{l}");
            let offset = bound.id(&format!("{p}.mod.offset"));
            let offset_row = g.reshape(offset, vec![1, 6 * d]);
            let m = g.add(t_mod, offset_row);
            let chunk = |g: &mut Graph<T>, i: usize| {
                let part = g.narrow(m, 1, i * d, d);
                g.reshape(part, vec![d])
            };
            let shift1 = chunk(g, 0);
            let scale1 = chunk(g, 1);
            let gate1 = chunk(g, 2);
            let shift2 = chunk(g, 3);
            let scale2 = chunk(g, 4);
            let gate2 = chunk(g, 5);

            // Attention branch with adaptive-layer-norm-single modulation.
            let h = g.layer_norm(x, None, None, cfg.norm_eps);
            let s1 = g.add_scalar(scale1, T::one());
            let h = g.mul_row(h, s1);
            let h = g.add_row(h, shift1);
            let attn_params = AttnParams::bind(bound, &format!("{p}.attn"));
            let attn = multihead_attention(g, h, h, h, cfg.heads, &attn_params, None)
                .expect("head geometry fixed by config");
            let gated = g.mul_row(attn, gate1);
            x = g.add(x, gated);

            // MLP branch.
            let h = g.layer_norm(x, None, None, cfg.norm_eps);
            let s2 = g.add_scalar(scale2, T::one());
            let h = g.mul_row(h, s2);
            let h = g.add_row(h, shift2);
            let h = muc_core::linear_apply(g, bound, &format!("{p}.mlp.l1"), h);
            let h = g.gelu(h);
            let h = muc_core::linear_apply(g, bound, &format!("{p}.mlp.l2"), h);
            let gated = g.mul_row(h, gate2);
            x = g.add(x, gated);
        }
        let x = g.layer_norm(x, None, None, cfg.norm_eps);
        muc_core::linear_apply(g, bound, "out.proj", x)
    }
}

impl<T: Scalar> Velocity<T> for DitModel<T> {
    fn velocity(&self, x: &Tensor<T>, t: f64, cond: Option<&Tensor<T>>) -> Tensor<T> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let x_id = g.constant(x.clone());
        let cond_id = cond.map(|c| g.constant(c.clone()));
        let out = self.forward_graph(&mut g, &bound, x_id, t, cond_id);
        g.value(out).clone()
    }
}

/// Bound-parameter wrapper so the DiT can serve the training objective.
pub struct BoundDit<'a, T> {
    pub model: &'a DitModel<T>,
    pub bound: &'a Bound,
}

impl<T: Scalar> GraphVelocity<T> for BoundDit<'_, T> {
    fn velocity_node(
        &self,
        g: &mut Graph<T>,
        x_t: NodeId,
        t: f64,
        cond: Option<NodeId>,
    ) -> NodeId {
        self.model.forward_graph(g, self.bound, x_t, t, cond)
    }
}

/// Conditional flow-matching objective on a batch: mean squared error between
/// the model velocity at x_t = (1−t)·x0 + t·x1 and the target u = x1 − x0.
pub fn fm_loss<T: Scalar, M: GraphVelocity<T>>(
    g: &mut Graph<T>,
    model: &M,
    batch: &[FlowExample<T>],
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(CodecError::Config("empty flow batch".into()));
    }
    let mut total: Option<NodeId> = None;
    for ex in batch {
        if !(0.0..=1.0).contains(&ex.t) {
            return Err(CodecError::Config(format!("t = {} outside [0,1]", ex.t)));
        }
        if ex.x0.shape() != ex.x1.shape() {
            return Err(CodecError::Config("x0/x1 shape mismatch".into()));
        }
        let (frames, c) = ex.x1.dims2();
        let mut xt = Tensor::zeros(vec![frames, c]);
        let mut u = Tensor::zeros(vec![frames, c]);
        let t = T::f(ex.t);
        for i in 0..frames * c {
            let x0 = ex.x0.data()[i];
            let x1 = ex.x1.data()[i];
            xt.data_mut()[i] = (T::one() - t) * x0 + t * x1;
            u.data_mut()[i] = x1 - x0;
        }
        let xt_id = g.constant(xt);
        let u_id = g.constant(u);
        let cond_id = ex.cond.as_ref().map(|cnd| g.constant(cnd.clone()));
        let v = model.velocity_node(g, xt_id, ex.t, cond_id);
        let loss = muc_core::mse_loss(g, v, u_id);
        total = Some(match total {
            Some(acc) => g.add(acc, loss),
            None => loss,
        });
    }
    let total = total.unwrap();
    Ok(g.scale(total, T::f(1.0 / batch.len() as f64)))
}

/// Euler sampler with classifier-free guidance:
/// v = v_uncond + s·(v_cond − v_uncond); x ← x + v/n at t_k = k/n.
/// s = 1 short-circuits to the conditional branch and s = 0 to the
/// unconditional one, making the CFG identities exact.
pub fn sample_euler_cfg<T: Scalar, M: Velocity<T>>(
    model: &M,
    shape: (usize, usize),
    cond: Option<&Tensor<T>>,
    sampler: &SamplerConfig,
) -> Result<Tensor<T>> {
    sampler.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut x = Tensor::<T>::randn(vec![shape.0, shape.1], &mut rng);
    let n = sampler.n_steps;
    let h = T::f(1.0 / n as f64);
    let s = sampler.guidance_scale;
    for k in 0..n {
        let t = k as f64 / n as f64;
        let v = match cond {
            None => model.velocity(&x, t, None),
            Some(c) if s == 1.0 => model.velocity(&x, t, Some(c)),
            Some(_) if s == 0.0 => model.velocity(&x, t, None),
            Some(c) => {
                let vc = model.velocity(&x, t, Some(c));
                let vu = model.velocity(&x, t, None);
                let mut v = Tensor::zeros(vec![shape.0, shape.1]);
                let sg = T::f(s);
                for i in 0..v.numel() {
                    let u = vu.data()[i];
                    v.data_mut()[i] = u + sg * (vc.data()[i] - u);
                }
                v
            }
        };
        for i in 0..x.numel() {
            let xv = x.data()[i] + h * v.data()[i];
            x.data_mut()[i] = xv;
        }
    }
    Ok(x)
}

// ── Training ────────────────────────────────────────────────────────

pub struct FmStepOutput<T> {
    pub loss: f64,
    pub grads: indexmap::IndexMap<String, Tensor<T>>,
}

/// One flow-matching training step; conditions are dropped with probability
/// `cond_drop` (replaced by the null embedding).
pub fn fm_train_step<T: Scalar>(
    model: &DitModel<T>,
    latents: &[Tensor<T>],
    conds: &[Tensor<T>],
    cond_drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FmStepOutput<T>> {
    assert_eq!(latents.len(), conds.len());
    let mut batch = Vec::with_capacity(latents.len());
    for (x1, cond) in latents.iter().zip(conds) {
        let x0 = Tensor::randn(x1.shape().to_vec(), rng);
        let t: f64 = rng.gen_range(0.0..1.0);
        let dropped = cond_drop > 0.0 && rng.gen_range(0.0..1.0) < cond_drop;
        batch.push(FlowExample {
            x1: x1.clone(),
            x0,
            t,
            cond: if dropped { None } else { Some(cond.clone()) },
        });
    }
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let wrapper = BoundDit { model, bound: &bound };
    let loss = fm_loss(&mut g, &wrapper, &batch)?;
    let value = g.value(loss).item().to64();
    if !value.is_finite() {
        return Err(CodecError::Diverged(format!("flow loss {value}")));
    }
    let grads = g.backward(loss)?;
    Ok(FmStepOutput { loss: value, grads: bound.grads(&g, &grads) })
}

pub const DIT_KIND: &str = "flowgen";

pub fn save<T: Scalar>(path: &Path, model: &DitModel<T>) -> Result<()> {
    let meta = serde_json::json!({
        "kind": DIT_KIND,
        "config": model.cfg,
        "sampler": model.sampler_defaults,
    });
    save_model(path, &model.params, &model.buffers, meta)
}

pub fn load<T: Scalar>(path: &Path) -> Result<DitModel<T>> {
    let (params, buffers, meta) = load_model(path)?;
    let cfg: DitConfig = meta_config(&meta, DIT_KIND)?;
    cfg.validate()?;
    let sampler_defaults: SamplerConfig = meta
        .get("sampler")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    Ok(DitModel { cfg, params, buffers, sampler_defaults })
}

/// Refuse to sample when the condition geometry recorded at train time does
/// not match what the caller supplies.
pub fn check_condition_dim<T: Scalar>(model: &DitModel<T>, cond_dim: usize) -> Result<()> {
    if model.cfg.cond_dim != cond_dim {
        return Err(CodecError::CheckpointMismatch(format!(
            "condition dim {cond_dim} does not match the {} recorded at train time",
            model.cfg.cond_dim
        )));
    }
    Ok(())
}
