//! Conformer feature extractor with two-stage training: masked prediction
//! against a frozen random-projection quantizer, then joint mel/CQT
//! reconstruction plus CTC lyric recognition. A configurable layer tap yields
//! the features the quantizer consumes.

use std::path::Path;

use muc_core::{
    multihead_attention, sinusoid_table, AttnParams, Bound, Graph, NodeId, ParamStore,
    Scalar, Tensor,
};
use muc_dsp::{MelSpec, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::VOCAB_SIZE;
use crate::error::{CodecError, Result};
use crate::model_io::{load_model, meta_config, save_model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuEncoderConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    /// Mel rate → token rate: a power of two realized by strided convolutions
    /// in the input stem.
    pub downsample: usize,
    pub tap_layer: usize,
    pub n_mels: usize,
    pub n_cqt_bins: usize,
    pub vocab_size: usize,
    /// Frozen random-quantizer codebook size for masked pretraining.
    pub mlm_codebook: usize,
    pub mlm_proj_dim: usize,
    /// Mask span length in token frames and target mask coverage.
    pub mask_span: usize,
    pub mask_coverage: f64,
    /// Sinusoidal position table length (max token frames).
    pub max_frames: usize,
}

impl Default for MuEncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MuEncoderConfig {
    /// Desk-scale training config.
    pub fn desk() -> Self {
        MuEncoderConfig {
            n_layers: 6,
            model_dim: 192,
            heads: 4,
            conv_kernel: 15,
            downsample: 4,
            tap_layer: 4,
            n_mels: 80,
            n_cqt_bins: 84,
            vocab_size: VOCAB_SIZE,
            mlm_codebook: 64,
            mlm_proj_dim: 16,
            mask_span: 10,
            mask_coverage: 0.3,
            max_frames: 4096,
        }
    }

    /// Reference-scale config: 13 layers with the tap at layer 7 (selectable,
    /// not exercised by CI training).
    pub fn reference() -> Self {
        MuEncoderConfig { n_layers: 13, tap_layer: 7, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap_layer < 1 || self.tap_layer > self.n_layers {
            return Err(CodecError::Config(format!(
                "tap_layer {} outside 1..={}",
                self.tap_layer, self.n_layers
            )));
        }
        if !self.downsample.is_power_of_two() {
            return Err(CodecError::Config("downsample must be a power of two".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(CodecError::Config("model_dim must divide into heads".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(CodecError::Config("conv_kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Features at the token rate (frames × model_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq<T> {
    pub data: Tensor<T>,
    pub token_rate_hz: f64,
}

impl<T: Scalar> FeatureSeq<T> {
    pub fn n_frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Frozen masked-prediction targets: a random projection of stacked mel
/// frames and a random codebook, never updated by training.
#[derive(Debug, Clone)]
pub struct MlmTargets<T> {
    pub projection: Tensor<T>,
    pub codebook: Tensor<T>,
}

impl<T: Scalar> MlmTargets<T> {
    pub fn generate(cfg: &MuEncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stacked = cfg.n_mels * cfg.downsample;
        let mut projection = Tensor::randn(vec![stacked, cfg.mlm_proj_dim], &mut rng);
        let scale = T::f(1.0 / (stacked as f64).sqrt());
        for v in projection.data_mut() {
            *v = *v * scale;
        }
        let codebook = Tensor::randn(vec![cfg.mlm_codebook, cfg.mlm_proj_dim], &mut rng);
        MlmTargets { projection, codebook }
    }

    /// Quantize stacked normalized mel frames to codebook labels.
    pub fn labels(&self, mel_norm: &Tensor<T>, downsample: usize) -> Vec<usize> {
        let (t_mel, n_mels) = mel_norm.dims2();
        let t_tok = t_mel / downsample;
        let stacked_dim = n_mels * downsample;
        let mut out = Vec::with_capacity(t_tok);
        let (v_mlm, pd) = self.codebook.dims2();
        for tt in 0..t_tok {
            let stacked: Vec<T> =
                mel_norm.data()[tt * downsample * n_mels..(tt + 1) * downsample * n_mels].to_vec();
            debug_assert_eq!(stacked.len(), stacked_dim);
            // project
            let mut proj = vec![0.0f64; pd];
            for (i, &x) in stacked.iter().enumerate() {
                for (j, p) in proj.iter_mut().enumerate() {
                    *p += x.to64() * self.projection.at2(i, j).to64();
                }
            }
            // nearest codeword, f64, lowest index on ties
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..v_mlm {
                let row = self.codebook.row(c);
                let d: f64 =
                    row.iter().zip(&proj).map(|(&cv, &pv)| (cv.to64() - pv).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            out.push(best);
        }
        out
    }
}

/// The Conformer encoder plus its prediction heads and normalization buffers.
pub struct MuEncoder<T> {
    pub cfg: MuEncoderConfig,
    pub params: ParamStore<T>,
    /// Frozen state: mel/cqt normalization stats, MLM projection+codebook.
    pub buffers: ParamStore<T>,
}

fn ffn_init<T: Scalar>(params: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) {
    params.insert(format!("{prefix}.ln.g"), Tensor::full(vec![dim], T::one()));
    params.insert(format!("{prefix}.ln.b"), Tensor::zeros(vec![dim]));
    muc_core::linear_init(params, &format!("{prefix}.lin1"), dim, dim * 4, rng);
    muc_core::linear_init(params, &format!("{prefix}.lin2"), dim * 4, dim, rng);
}

impl<T: Scalar> MuEncoder<T> {
    pub fn new(cfg: MuEncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim;
        let mut params = ParamStore::new();

        // Input stem: log2(downsample) strided convolutions.
        let n_stem = cfg.downsample.trailing_zeros() as usize;
        let mut c_in = cfg.n_mels;
        for s in 0..n_stem {
            params.insert(
                format!("stem.conv{s}.w"),
                muc_core::kaiming_uniform(vec![d, c_in, 5], c_in * 5, &mut rng),
            );
            params.insert(format!("stem.conv{s}.b"), Tensor::zeros(vec![d]));
            c_in = d;
        }

        for l in 0..cfg.n_layers {
            let p = format!("l{l}");
            ffn_init(&mut params, &format!("{p}.ffn1"), d, &mut rng);
            params.insert(format!("{p}.attn.ln.g"), Tensor::full(vec![d], T::one()));
            params.insert(format!("{p}.attn.ln.b"), Tensor::zeros(vec![d]));
            AttnParams::init(&mut params, &format!("{p}.attn"), d, &mut rng);
            params.insert(format!("{p}.conv.ln.g"), Tensor::full(vec![d], T::one()));
            params.insert(format!("{p}.conv.ln.b"), Tensor::zeros(vec![d]));
            muc_core::linear_init(&mut params, &format!("{p}.conv.pw1"), d, 2 * d, &mut rng);
            params.insert(
                format!("{p}.conv.dw.w"),
                muc_core::kaiming_uniform(vec![d, 1, cfg.conv_kernel], cfg.conv_kernel, &mut rng),
            );
            params.insert(format!("{p}.conv.dw.b"), Tensor::zeros(vec![d]));
            params.insert(format!("{p}.conv.norm.g"), Tensor::full(vec![d], T::one()));
            params.insert(format!("{p}.conv.norm.b"), Tensor::zeros(vec![d]));
            muc_core::linear_init(&mut params, &format!("{p}.conv.pw2"), d, d, &mut rng);
            ffn_init(&mut params, &format!("{p}.ffn2"), d, &mut rng);
            params.insert(format!("{p}.out.ln.g"), Tensor::full(vec![d], T::one()));
            params.insert(format!("{p}.out.ln.b"), Tensor::zeros(vec![d]));
        }

        // Heads: MLM (stage 1), mel/CQT reconstruction + CTC (stage 2).
        // The MLM head starts at zero so untrained predictions are uniform.
        params.insert("head.mlm.w", Tensor::zeros(vec![d, cfg.mlm_codebook]));
        params.insert("head.mlm.b", Tensor::zeros(vec![cfg.mlm_codebook]));
        muc_core::linear_init(&mut params, "head.mel.l1", d, d, &mut rng);
        muc_core::linear_init(&mut params, "head.mel.l2", d, cfg.n_mels, &mut rng);
        muc_core::linear_init(&mut params, "head.cqt.l1", d, d, &mut rng);
        muc_core::linear_init(&mut params, "head.cqt.l2", d, cfg.n_cqt_bins, &mut rng);
        muc_core::linear_init(&mut params, "head.ctc", d, cfg.vocab_size + 1, &mut rng);

        let mut buffers = ParamStore::new();
        let targets = MlmTargets::<T>::generate(&cfg, seed ^ 0xB1E55);
        buffers.insert("mlm.projection", targets.projection);
        buffers.insert("mlm.codebook", targets.codebook);
        buffers.insert("norm.mel.mean", Tensor::zeros(vec![cfg.n_mels]));
        buffers.insert("norm.mel.std", Tensor::full(vec![cfg.n_mels], T::one()));
        buffers.insert("norm.cqt.mean", Tensor::zeros(vec![cfg.n_cqt_bins]));
        buffers.insert("norm.cqt.std", Tensor::full(vec![cfg.n_cqt_bins], T::one()));
        buffers.insert("pos", sinusoid_table(cfg.max_frames, d));

        Ok(MuEncoder { cfg, params, buffers })
    }

    pub fn mlm_targets(&self) -> MlmTargets<T> {
        MlmTargets {
            projection: self.buffers.get("mlm.projection").clone(),
            codebook: self.buffers.get("mlm.codebook").clone(),
        }
    }

    /// Set mel/cqt normalization statistics (computed once over the corpus).
    pub fn set_norm_stats(
        &mut self,
        mel_mean: Tensor<T>,
        mel_std: Tensor<T>,
        cqt_mean: Tensor<T>,
        cqt_std: Tensor<T>,
    ) {
        *self.buffers.get_mut("norm.mel.mean") = mel_mean;
        *self.buffers.get_mut("norm.mel.std") = mel_std;
        *self.buffers.get_mut("norm.cqt.mean") = cqt_mean;
        *self.buffers.get_mut("norm.cqt.std") = cqt_std;
    }

    pub fn normalize_mel(&self, mel: &MelSpec<T>) -> Tensor<T>
    where
        T: Sample,
    {
        let mean = self.buffers.get("norm.mel.mean");
        let std = self.buffers.get("norm.mel.std");
        normalize_rows(&mel.frames, mean, std)
    }

    pub fn normalize_cqt(&self, frames: &Tensor<T>) -> Tensor<T> {
        let mean = self.buffers.get("norm.cqt.mean");
        let std = self.buffers.get("norm.cqt.std");
        normalize_rows(frames, mean, std)
    }

    /// Stem forward on an already-normalized mel matrix (graph-recorded).
    pub fn stem_graph(&self, g: &mut Graph<T>, bound: &Bound, mel_norm: NodeId) -> NodeId {
        let n_stem = self.cfg.downsample.trailing_zeros() as usize;
        let mut x = mel_norm;
        for s in 0..n_stem {
            let w = bound.id(&format!("stem.conv{s}.w"));
            let b = bound.id(&format!("stem.conv{s}.b"));
            x = g.conv1d(x, w, 2, 2, 1);
            x = g.add_row(x, b);
            x = g.silu(x);
        }
        x
    }

    fn ffn_graph(&self, g: &mut Graph<T>, bound: &Bound, prefix: &str, x: NodeId) -> NodeId {
        let h = g.layer_norm(
            x,
            Some(bound.id(&format!("{prefix}.ln.g"))),
            Some(bound.id(&format!("{prefix}.ln.b"))),
            1e-6,
        );
        let h = muc_core::linear_apply(g, bound, &format!("{prefix}.lin1"), h);
        let h = g.silu(h);
        muc_core::linear_apply(g, bound, &format!("{prefix}.lin2"), h)
    }

    fn block_graph(&self, g: &mut Graph<T>, bound: &Bound, layer: usize, x: NodeId) -> NodeId {
        let d = self.cfg.model_dim;
        let p = format!("l{layer}");
        // Half-step feed-forward.
        let ff1 = self.ffn_graph(g, bound, &format!("{p}.ffn1"), x);
        let ff1 = g.scale(ff1, T::f(0.5));
        let x = g.add(x, ff1);
        // Self-attention.
        let h = g.layer_norm(
            x,
            Some(bound.id(&format!("{p}.attn.ln.g"))),
            Some(bound.id(&format!("{p}.attn.ln.b"))),
            1e-6,
        );
        let attn_params = AttnParams::bind(bound, &format!("{p}.attn"));
        let attn = multihead_attention(g, h, h, h, self.cfg.heads, &attn_params, None)
            .expect("head count validated at config time");
        let x = g.add(x, attn);
        // Convolution module: pointwise → GLU → depthwise → norm → SiLU → pointwise.
        let h = g.layer_norm(
            x,
            Some(bound.id(&format!("{p}.conv.ln.g"))),
            Some(bound.id(&format!("{p}.conv.ln.b"))),
            1e-6,
        );
        let h = muc_core::linear_apply(g, bound, &format!("{p}.conv.pw1"), h);
        let a = g.narrow(h, 1, 0, d);
        let b = g.narrow(h, 1, d, d);
        let gate = g.sigmoid(b);
        let h = g.mul(a, gate);
        let pad = (self.cfg.conv_kernel - 1) / 2;
        let h = g.conv1d(h, bound.id(&format!("{p}.conv.dw.w")), 1, pad, d);
        let h = g.add_row(h, bound.id(&format!("{p}.conv.dw.b")));
        let h = g.layer_norm(
            h,
            Some(bound.id(&format!("{p}.conv.norm.g"))),
            Some(bound.id(&format!("{p}.conv.norm.b"))),
            1e-6,
        );
        let h = g.silu(h);
        let h = muc_core::linear_apply(g, bound, &format!("{p}.conv.pw2"), h);
        let x = g.add(x, h);
        // Second half-step feed-forward and closing norm.
        let ff2 = self.ffn_graph(g, bound, &format!("{p}.ffn2"), x);
        let ff2 = g.scale(ff2, T::f(0.5));
        let x = g.add(x, ff2);
        g.layer_norm(
            x,
            Some(bound.id(&format!("{p}.out.ln.g"))),
            Some(bound.id(&format!("{p}.out.ln.b"))),
            1e-6,
        )
    }

    /// Full graph-recorded encode: all layer outputs at the token rate.
    pub fn encode_graph(&self, g: &mut Graph<T>, bound: &Bound, mel_norm: NodeId) -> Vec<NodeId> {
        let t_mel = g.shape(mel_norm)[0];
        assert!(
            t_mel >= self.cfg.downsample,
            "input of {t_mel} mel frames shorter than downsample {}",
            self.cfg.downsample
        );
        let stem = self.stem_graph(g, bound, mel_norm);
        let t_tok = g.shape(stem)[0];
        assert!(t_tok <= self.cfg.max_frames, "sequence exceeds position table");
        let pos = {
            let table = self.buffers.get("pos");
            let d = self.cfg.model_dim;
            let data = table.data()[..t_tok * d].to_vec();
            g.constant(Tensor::from_vec(vec![t_tok, d], data))
        };
        let mut x = g.add(stem, pos);
        let mut outs = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            x = self.block_graph(g, bound, l, x);
            outs.push(x);
        }
        outs
    }

    /// Inference-path encode of a raw mel spectrogram: per-layer features.
    pub fn encode(&self, mel: &MelSpec<T>) -> Result<Vec<FeatureSeq<T>>>
    where
        T: Sample,
    {
        if mel.n_frames() < self.cfg.downsample {
            return Err(CodecError::Config(format!(
                "input of {} mel frames shorter than downsample {}",
                mel.n_frames(),
                self.cfg.downsample
            )));
        }
        let mel_norm = self.normalize_mel(mel);
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let mel_id = g.constant(mel_norm);
        let outs = self.encode_graph(&mut g, &bound, mel_id);
        let token_rate = mel.frame_rate() / self.cfg.downsample as f64;
        Ok(outs
            .into_iter()
            .map(|id| FeatureSeq { data: g.value(id).clone(), token_rate_hz: token_rate })
            .collect())
    }

    /// Bind parameters as constants (no gradient bookkeeping) for inference.
    fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        let mut frozen = self.params.clone();
        for name in frozen.names().cloned().collect::<Vec<_>>() {
            frozen.get_mut(&name).requires_grad = false;
        }
        frozen.bind(g)
    }
}

fn normalize_rows<T: Scalar>(x: &Tensor<T>, mean: &Tensor<T>, std: &Tensor<T>) -> Tensor<T> {
    let (t, d) = x.dims2();
    assert_eq!(mean.numel(), d);
    let mut out = Tensor::zeros(vec![t, d]);
    let floor = T::f(1e-6);
    for ti in 0..t {
        for ci in 0..d {
            let s = std.data()[ci].max(floor);
            out.data_mut()[ti * d + ci] = (x.at2(ti, ci) - mean.data()[ci]) / s;
        }
    }
    out
}

/// Column mean/std over a set of row-matrices.
pub fn column_stats<T: Scalar>(mats: &[&Tensor<T>]) -> (Tensor<T>, Tensor<T>) {
    assert!(!mats.is_empty());
    let d = mats[0].dims2().1;
    let mut count = 0f64;
    let mut mean = vec![0.0f64; d];
    for m in mats {
        let (t, dm) = m.dims2();
        assert_eq!(dm, d);
        for ti in 0..t {
            for ci in 0..d {
                mean[ci] += m.at2(ti, ci).to64();
            }
        }
        count += t as f64;
    }
    for v in &mut mean {
        *v /= count;
    }
    let mut var = vec![0.0f64; d];
    for m in mats {
        let (t, _) = m.dims2();
        for ti in 0..t {
            for ci in 0..d {
                let dv = m.at2(ti, ci).to64() - mean[ci];
                var[ci] += dv * dv;
            }
        }
    }
    let std: Vec<T> = var.iter().map(|&v| T::f((v / count).sqrt().max(1e-6))).collect();
    (
        Tensor::from_vec(vec![d], mean.iter().map(|&v| T::f(v)).collect()),
        Tensor::from_vec(vec![d], std),
    )
}

/// Select one layer's features (1-based), unchanged.
pub fn tap<T: Scalar>(features: &[FeatureSeq<T>], tap_layer: usize) -> Result<&FeatureSeq<T>> {
    if tap_layer < 1 || tap_layer > features.len() {
        return Err(CodecError::Config(format!(
            "tap layer {tap_layer} outside 1..={}",
            features.len()
        )));
    }
    Ok(&features[tap_layer - 1])
}

// ── Masked pretraining ──────────────────────────────────────────────

/// Seeded mask spans over `t_tok` token frames; span starts are drawn until
/// coverage reaches the configured fraction (clamped to [0.2, 0.45]).
pub fn sample_mask_spans(
    t_tok: usize,
    span: usize,
    coverage: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>> {
    if coverage <= 0.0 {
        return Err(CodecError::Config("mask coverage must be positive".into()));
    }
    if !(0.2..=0.4).contains(&coverage) {
        return Err(CodecError::Config(format!(
            "mask coverage {coverage} outside [0.2, 0.4]"
        )));
    }
    let span = span.min(t_tok);
    let mut mask = vec![false; t_tok];
    let mut covered = 0usize;
    let target = ((coverage * t_tok as f64).round() as usize).max(1);
    let mut guard = 0;
    while covered < target && guard < 10 * t_tok {
        guard += 1;
        let start = rng.gen_range(0..=t_tok - span);
        for m in mask.iter_mut().skip(start).take(span) {
            if !*m {
                *m = true;
                covered += 1;
            }
        }
        if covered as f64 >= 0.45 * t_tok as f64 {
            break;
        }
    }
    if covered == 0 {
        return Err(CodecError::Config("empty mask set".into()));
    }
    Ok(mask)
}

pub struct MlmStepOutput<T> {
    pub loss: f64,
    pub grads: indexmap::IndexMap<String, Tensor<T>>,
}

/// One masked-prediction step over a batch of normalized mel segments.
/// Labels come from the frozen random quantizer on the unmasked input;
/// masked mel frames are replaced by seeded low-amplitude noise.
pub fn mlm_step<T: Scalar>(
    model: &MuEncoder<T>,
    mel_norm_batch: &[Tensor<T>],
    rng: &mut ChaCha8Rng,
) -> Result<MlmStepOutput<T>> {
    let targets = model.mlm_targets();
    let ds = model.cfg.downsample;
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let mut total: Option<NodeId> = None;
    for mel_norm in mel_norm_batch {
        let (t_mel, n_mels) = mel_norm.dims2();
        let t_tok = t_mel / ds;
        if t_tok * ds != t_mel {
            return Err(CodecError::Config("mel frames must divide by downsample".into()));
        }
        let labels = targets.labels(mel_norm, ds);
        let mask = sample_mask_spans(t_tok, model.cfg.mask_span, model.cfg.mask_coverage, rng)?;
        let masked_positions: Vec<usize> =
            mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();

        let mut masked = mel_norm.clone();
        for (tt, &m) in mask.iter().enumerate() {
            if m {
                for mf in tt * ds..(tt + 1) * ds {
                    for ci in 0..n_mels {
                        masked.data_mut()[mf * n_mels + ci] =
                            T::f(rng.sample::<f64, _>(rand_distr_standard()) * 0.1);
                    }
                }
            }
        }
        let mel_id = g.constant(masked);
        let outs = model.encode_graph(&mut g, &bound, mel_id);
        let last = *outs.last().unwrap();
        let logits = muc_core::linear_apply(&mut g, &bound, "head.mlm", last);
        let picked = g.gather_rows(logits, masked_positions.clone());
        let lab: Vec<usize> = masked_positions.iter().map(|&p| labels[p]).collect();
        let loss = g.cross_entropy(picked, lab);
        total = Some(match total {
            Some(acc) => g.add(acc, loss),
            None => loss,
        });
    }
    let total = total.ok_or_else(|| CodecError::Config("empty batch".into()))?;
    let total = g.scale(total, T::f(1.0 / mel_norm_batch.len() as f64));
    let grads = g.backward(total)?;
    Ok(MlmStepOutput { loss: g.value(total).item().to64(), grads: bound.grads(&g, &grads) })
}

// rand_distr's StandardNormal without importing the crate at every call site.
fn rand_distr_standard() -> impl rand::distributions::Distribution<f64> {
    struct Std;
    impl rand::distributions::Distribution<f64> for Std {
        fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            // Box-Muller on two uniforms; adequate for mask noise.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }
    }
    Std
}

// ── Stage-2 training ────────────────────────────────────────────────

pub struct Stage2Item<T> {
    /// Raw (unnormalized) log-mel segment, frames divisible by downsample.
    pub mel: Tensor<T>,
    /// Raw log-CQT segment, same frame count.
    pub cqt: Tensor<T>,
    /// Transcript symbols (possibly empty).
    pub symbols: Vec<u8>,
}

pub struct Stage2Output<T> {
    pub total: f64,
    pub mel_recon: f64,
    pub cqt_recon: f64,
    pub ctc: f64,
    pub grads: indexmap::IndexMap<String, Tensor<T>>,
}

/// Loss weights: 1.0 · (mel L1 + CQT L1) + 0.2 · CTC. CTC is the forward
/// negative log-likelihood normalized by input frames so the three terms
/// share a per-frame scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Stage2Weights {
    pub reconstruction: f64,
    pub lyrics: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Stage2Weights { reconstruction: 1.0, lyrics: 0.2 }
    }
}

fn recon_head<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    prefix: &str,
    tapped: NodeId,
    upsample: usize,
) -> NodeId {
    let up = g.upsample_rows(tapped, upsample);
    let h = muc_core::linear_apply(g, bound, &format!("{prefix}.l1"), up);
    let h = g.silu(h);
    muc_core::linear_apply(g, bound, &format!("{prefix}.l2"), h)
}

/// One stage-2 step: reconstruction heads read the tap layer (upsampled back
/// to the mel rate), the CTC head reads the final layer.
pub fn stage2_step<T: Scalar>(
    model: &MuEncoder<T>,
    batch: &[Stage2Item<T>],
    weights: Stage2Weights,
) -> Result<Stage2Output<T>> {
    let ds = model.cfg.downsample;
    let blank = model.cfg.vocab_size;
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let mut total: Option<NodeId> = None;
    let mut mel_sum = 0.0;
    let mut cqt_sum = 0.0;
    let mut ctc_sum = 0.0;
    for item in batch {
        for &s in &item.symbols {
            if s as usize >= model.cfg.vocab_size {
                return Err(CodecError::Config(format!("symbol {s} outside vocabulary")));
            }
        }
        let mel_mean = model.buffers.get("norm.mel.mean");
        let mel_std = model.buffers.get("norm.mel.std");
        let cqt_mean = model.buffers.get("norm.cqt.mean");
        let cqt_std = model.buffers.get("norm.cqt.std");
        let mel_norm = normalize_rows(&item.mel, mel_mean, mel_std);
        let cqt_norm = normalize_rows(&item.cqt, cqt_mean, cqt_std);

        let mel_id = g.constant(mel_norm.clone());
        let outs = model.encode_graph(&mut g, &bound, mel_id);
        let tapped = outs[model.cfg.tap_layer - 1];
        let last = *outs.last().unwrap();
        let t_tok = g.shape(tapped)[0];

        let mel_target = g.constant(mel_norm);
        let cqt_target = g.constant(cqt_norm);
        let mel_pred = recon_head(&mut g, &bound, "head.mel", tapped, ds);
        let cqt_pred = recon_head(&mut g, &bound, "head.cqt", tapped, ds);
        let mel_l1 = muc_core::l1_loss(&mut g, mel_pred, mel_target);
        let cqt_l1 = muc_core::l1_loss(&mut g, cqt_pred, cqt_target);

        let logits = muc_core::linear_apply(&mut g, &bound, "head.ctc", last);
        let targets: Vec<usize> = item.symbols.iter().map(|&s| s as usize).collect();
        let ctc_raw = g.ctc_loss(logits, &targets, blank)?;
        let ctc = g.scale(ctc_raw, T::f(1.0 / t_tok as f64));

        mel_sum += g.value(mel_l1).item().to64();
        cqt_sum += g.value(cqt_l1).item().to64();
        ctc_sum += g.value(ctc).item().to64();

        let recon = g.add(mel_l1, cqt_l1);
        let recon = g.scale(recon, T::f(weights.reconstruction));
        let lyr = g.scale(ctc, T::f(weights.lyrics));
        let item_loss = g.add(recon, lyr);
        total = Some(match total {
            Some(acc) => g.add(acc, item_loss),
            None => item_loss,
        });
    }
    let total = total.ok_or_else(|| CodecError::Config("empty batch".into()))?;
    let inv = 1.0 / batch.len() as f64;
    let total = g.scale(total, T::f(inv));
    let grads = g.backward(total)?;
    Ok(Stage2Output {
        total: g.value(total).item().to64(),
        mel_recon: mel_sum * inv,
        cqt_recon: cqt_sum * inv,
        ctc: ctc_sum * inv,
        grads: bound.grads(&g, &grads),
    })
}

// ── Checkpoint I/O ──────────────────────────────────────────────────

pub const MUENCODER_KIND: &str = "muencoder";

pub fn save<T: Scalar>(path: &Path, model: &MuEncoder<T>, extra: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({
        "kind": MUENCODER_KIND,
        "config": model.cfg,
        "extra": extra,
    });
    save_model(path, &model.params, &model.buffers, meta)
}

pub fn load<T: Scalar>(path: &Path) -> Result<MuEncoder<T>> {
    let (params, buffers, meta) = load_model(path)?;
    let cfg: MuEncoderConfig = meta_config(&meta, MUENCODER_KIND)?;
    cfg.validate()?;
    Ok(MuEncoder { cfg, params, buffers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> MuEncoderConfig {
        MuEncoderConfig {
            n_layers: 2,
            model_dim: 16,
            heads: 2,
            conv_kernel: 5,
            tap_layer: 1,
            n_mels: 8,
            n_cqt_bins: 6,
            mlm_codebook: 8,
            mlm_proj_dim: 4,
            max_frames: 256,
            ..MuEncoderConfig::desk()
        }
    }

    fn mel_of(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(vec![t, d], &mut rng)
    }

    #[test]
    fn encode_shapes_are_ceil_t_over_downsample() {
        let model = MuEncoder::<f64>::new(tiny_cfg(), 1).unwrap();
        for t_mel in [64usize, 61, 37] {
            let mel = mel_of(t_mel, 8, 2);
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let mel_id = g.constant(mel);
            let outs = model.encode_graph(&mut g, &bound, mel_id);
            assert_eq!(outs.len(), 2);
            for &o in &outs {
                assert_eq!(g.shape(o), &[t_mel.div_ceil(4), 16], "t_mel={t_mel}");
            }
        }
    }

    #[test]
    fn all_layer_outputs_share_shape_and_differ_in_value() {
        let cfg = MuEncoderConfig { n_layers: 11, ..tiny_cfg() };
        let model = MuEncoder::<f64>::new(cfg, 3).unwrap();
        let mel = mel_of(64, 8, 4);
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let mel_id = g.constant(mel);
        let outs = model.encode_graph(&mut g, &bound, mel_id);
        let (a, b, c) = (outs[2], outs[6], outs[10]);
        assert_eq!(g.shape(a), g.shape(b));
        assert_eq!(g.shape(b), g.shape(c));
        let diff: f64 = g
            .value(a)
            .data()
            .iter()
            .zip(g.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn floor_mel_input_still_produces_finite_nonzero_output() {
        let model = MuEncoder::<f64>::new(tiny_cfg(), 5).unwrap();
        let mel = Tensor::full(vec![32, 8], (1e-5f64).ln());
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let mel_id = g.constant(mel);
        let outs = model.encode_graph(&mut g, &bound, mel_id);
        let last = g.value(*outs.last().unwrap());
        assert!(last.all_finite());
        let norm: f64 = last.data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0);
    }

    #[test]
    fn tap_selects_layers_and_validates_range() {
        let model = MuEncoder::<f64>::new(tiny_cfg(), 6).unwrap();
        let mel = MelSpec {
            frames: mel_of(32, 8, 7),
            hop: 240,
            sample_rate: 24000,
            n_mels: 8,
            n_fft: 1024,
        };
        let feats = model.encode(&mel).unwrap();
        assert!(tap(&feats, 0).is_err());
        assert!(tap(&feats, 3).is_err());
        let t1 = tap(&feats, 1).unwrap();
        let again = tap(&feats, 1).unwrap();
        assert_eq!(t1.data, again.data);
        assert_eq!(t1.token_rate_hz, 25.0);
    }

    #[test]
    fn stem_is_length_covariant_on_interior_frames() {
        // Purely convolutional stem: encoding a concatenation equals the
        // concatenation of encodings away from the receptive-field boundary.
        let model = MuEncoder::<f64>::new(tiny_cfg(), 8).unwrap();
        let a = mel_of(40, 8, 9);
        let b = mel_of(48, 8, 10);
        let joined = {
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::from_vec(vec![88, 8], data)
        };
        let run = |m: &Tensor<f64>| {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let id = g.constant(m.clone());
            let out = model.stem_graph(&mut g, &bound, id);
            g.value(out).clone()
        };
        let sa = run(&a);
        let sj = run(&joined);
        // Interior of the first piece: skip 2 token frames at each boundary.
        for tt in 2..sa.dims2().0 - 2 {
            for ci in 0..16 {
                let x = sa.at2(tt, ci);
                let y = sj.at2(tt, ci);
                assert!((x - y).abs() < 1e-10, "frame {tt} ch {ci}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn mlm_initial_loss_is_near_uniform_entropy() {
        let cfg = MuEncoderConfig { mlm_codebook: 64, ..tiny_cfg() };
        let model = MuEncoder::<f64>::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mels: Vec<Tensor<f64>> = (0..2).map(|i| mel_of(64, 8, 100 + i)).collect();
        let out = mlm_step(&model, &mels, &mut rng).unwrap();
        let expected = (64f64).ln();
        assert!((out.loss - expected).abs() < 0.5, "loss {} vs ln(64) {}", out.loss, expected);
    }

    #[test]
    fn zero_mask_coverage_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        assert!(sample_mask_spans(32, 10, 0.0, &mut rng).is_err());
        let mask = sample_mask_spans(32, 10, 0.3, &mut rng).unwrap();
        let covered = mask.iter().filter(|&&m| m).count();
        assert!(covered >= 6 && covered <= 15, "covered {covered}");
    }

    #[test]
    fn mlm_targets_are_frozen_by_construction() {
        let cfg = tiny_cfg();
        let model = MuEncoder::<f64>::new(cfg, 21).unwrap();
        let before = model.mlm_targets();
        // Run a step and verify the buffers are untouched (they are not bound
        // into the training graph at all).
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mels: Vec<Tensor<f64>> = vec![mel_of(32, 8, 23)];
        let _ = mlm_step(&model, &mels, &mut rng).unwrap();
        let after = model.mlm_targets();
        assert_eq!(before.projection.data(), after.projection.data());
        assert_eq!(before.codebook.data(), after.codebook.data());
    }

    #[test]
    fn stage2_weights_default_to_1_and_02() {
        let w = Stage2Weights::default();
        assert_eq!(w.reconstruction, 1.0);
        assert_eq!(w.lyrics, 0.2);
    }

    #[test]
    fn stage2_empty_transcript_is_finite_blank_path() {
        let model = MuEncoder::<f64>::new(tiny_cfg(), 31).unwrap();
        let item = Stage2Item {
            mel: mel_of(32, 8, 32),
            cqt: mel_of(32, 6, 33),
            symbols: vec![],
        };
        let out = stage2_step(&model, &[item], Stage2Weights::default()).unwrap();
        assert!(out.ctc.is_finite());
        assert!(out.total.is_finite());
    }

    #[test]
    fn stage2_rejects_out_of_vocab_symbols() {
        let model = MuEncoder::<f64>::new(tiny_cfg(), 41).unwrap();
        let item = Stage2Item {
            mel: mel_of(32, 8, 42),
            cqt: mel_of(32, 6, 43),
            symbols: vec![200],
        };
        assert!(stage2_step(&model, &[item], Stage2Weights::default()).is_err());
    }

    #[test]
    fn l1_is_linear_in_the_error() {
        // Doubling the head's output error doubles the L1 term.
        let mut g = Graph::<f64>::new();
        let target = g.constant(Tensor::zeros(vec![4, 3]));
        let e1 = g.constant(Tensor::full(vec![4, 3], 0.25));
        let e2 = g.constant(Tensor::full(vec![4, 3], 0.5));
        let l1 = muc_core::l1_loss(&mut g, e1, target);
        let l2 = muc_core::l1_loss(&mut g, e2, target);
        assert!((g.value(l2).item() - 2.0 * g.value(l1).item()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.mck");
        let model = MuEncoder::<f32>::new(tiny_cfg(), 51).unwrap();
        save(&path, &model, serde_json::json!({"stage": 1})).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.params.len(), model.params.len());
        for (name, t) in model.params.iter() {
            assert_eq!(loaded.params.get(name).data(), t.data(), "{name}");
        }
        for (name, t) in model.buffers.iter() {
            assert_eq!(loaded.buffers.get(name).data(), t.data(), "{name}");
        }
    }
}
