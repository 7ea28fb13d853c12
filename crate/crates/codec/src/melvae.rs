//! Convolutional variational autoencoder over log-mel spectrograms. Its
//! latent space (4× time compression, matching the token rate) is the target
//! the flow-matching generator reconstructs.

use std::path::Path;

use muc_core::{Bound, Graph, NodeId, ParamStore, Scalar, Tensor};
use muc_dsp::{MelSpec, Sample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};
use crate::model_io::{load_model, meta_config, save_model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub n_mels: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    /// Time compression: two stride-2 convolutions.
    pub time_factor: usize,
    /// KL weight.
    pub beta: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { n_mels: 80, latent_channels: 16, hidden: 96, time_factor: 4, beta: 1e-2 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_factor != 4 {
            return Err(CodecError::Config("time_factor 4 (two stride-2 convs) supported".into()));
        }
        if self.beta < 0.0 {
            return Err(CodecError::Config("beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Latent tensor at the token rate (frames × channels).
#[derive(Debug, Clone, PartialEq)]
pub struct Latent<T> {
    pub data: Tensor<T>,
    pub time_factor: usize,
}

impl<T: Scalar> Latent<T> {
    pub fn n_frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
}

pub struct MelVae<T> {
    pub cfg: VaeConfig,
    pub params: ParamStore<T>,
    /// Mel normalization plus latent whitening statistics.
    pub buffers: ParamStore<T>,
}

impl<T: Scalar> MelVae<T> {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        let c = cfg.latent_channels;
        let mut params = ParamStore::new();
        params.insert("enc.conv0.w", muc_core::kaiming_uniform(vec![h, cfg.n_mels, 5], cfg.n_mels * 5, &mut rng));
        params.insert("enc.conv0.b", Tensor::zeros(vec![h]));
        params.insert("enc.conv1.w", muc_core::kaiming_uniform(vec![h, h, 5], h * 5, &mut rng));
        params.insert("enc.conv1.b", Tensor::zeros(vec![h]));
        muc_core::linear_init(&mut params, "enc.out", h, 2 * c, &mut rng);
        muc_core::linear_init(&mut params, "dec.inp", c, h, &mut rng);
        params.insert("dec.convt0.w", muc_core::kaiming_uniform(vec![h, h, 4], h * 4, &mut rng));
        params.insert("dec.convt0.b", Tensor::zeros(vec![h]));
        params.insert("dec.convt1.w", muc_core::kaiming_uniform(vec![h, h, 4], h * 4, &mut rng));
        params.insert("dec.convt1.b", Tensor::zeros(vec![h]));
        muc_core::linear_init(&mut params, "dec.out", h, cfg.n_mels, &mut rng);

        let mut buffers = ParamStore::new();
        buffers.insert("norm.mel.mean", Tensor::zeros(vec![cfg.n_mels]));
        buffers.insert("norm.mel.std", Tensor::full(vec![cfg.n_mels], T::one()));
        buffers.insert("latent.mean", Tensor::zeros(vec![c]));
        buffers.insert("latent.std", Tensor::full(vec![c], T::one()));
        Ok(MelVae { cfg, params, buffers })
    }

    pub fn set_mel_stats(&mut self, mean: Tensor<T>, std: Tensor<T>) {
        *self.buffers.get_mut("norm.mel.mean") = mean;
        *self.buffers.get_mut("norm.mel.std") = std;
    }

    pub fn set_latent_stats(&mut self, mean: Tensor<T>, std: Tensor<T>) {
        *self.buffers.get_mut("latent.mean") = mean;
        *self.buffers.get_mut("latent.std") = std;
    }

    pub fn latent_stats(&self) -> (Tensor<T>, Tensor<T>) {
        (self.buffers.get("latent.mean").clone(), self.buffers.get("latent.std").clone())
    }

    fn normalize(&self, mel: &Tensor<T>) -> Tensor<T> {
        let mean = self.buffers.get("norm.mel.mean");
        let std = self.buffers.get("norm.mel.std");
        let (t, d) = mel.dims2();
        let mut out = Tensor::zeros(vec![t, d]);
        let floor = T::f(1e-6);
        for ti in 0..t {
            for ci in 0..d {
                out.data_mut()[ti * d + ci] =
                    (mel.at2(ti, ci) - mean.data()[ci]) / std.data()[ci].max(floor);
            }
        }
        out
    }

    fn denormalize(&self, mel: &Tensor<T>) -> Tensor<T> {
        let mean = self.buffers.get("norm.mel.mean");
        let std = self.buffers.get("norm.mel.std");
        let (t, d) = mel.dims2();
        let mut out = Tensor::zeros(vec![t, d]);
        for ti in 0..t {
            for ci in 0..d {
                out.data_mut()[ti * d + ci] = mel.at2(ti, ci) * std.data()[ci] + mean.data()[ci];
            }
        }
        out
    }

    /// Pad (by repeating the final frame) to a multiple of the time factor.
    pub fn pad_frames(&self, mel: &Tensor<T>) -> Tensor<T> {
        let (t, d) = mel.dims2();
        let rem = t % self.cfg.time_factor;
        if rem == 0 {
            return mel.clone();
        }
        let extra = self.cfg.time_factor - rem;
        let mut data = mel.data().to_vec();
        for _ in 0..extra {
            data.extend_from_slice(mel.row(t - 1));
        }
        Tensor::from_vec(vec![t + extra, d], data)
    }

    /// Graph-recorded encoder on a normalized, padded mel: (mu, logvar).
    pub fn encode_graph(&self, g: &mut Graph<T>, bound: &Bound, mel_norm: NodeId) -> (NodeId, NodeId) {
        let c = self.cfg.latent_channels;
        let mut x = g.conv1d(mel_norm, bound.id("enc.conv0.w"), 2, 2, 1);
        x = g.add_row(x, bound.id("enc.conv0.b"));
        x = g.silu(x);
        x = g.conv1d(x, bound.id("enc.conv1.w"), 2, 2, 1);
        x = g.add_row(x, bound.id("enc.conv1.b"));
        x = g.silu(x);
        let out = muc_core::linear_apply(g, bound, "enc.out", x);
        let mu = g.narrow(out, 1, 0, c);
        let logvar = g.narrow(out, 1, c, c);
        (mu, logvar)
    }

    /// Graph-recorded decoder: latent → normalized mel (4× upsampled).
    pub fn decode_graph(&self, g: &mut Graph<T>, bound: &Bound, z: NodeId) -> NodeId {
        let mut x = muc_core::linear_apply(g, bound, "dec.inp", z);
        x = g.silu(x);
        x = g.conv_transpose1d(x, bound.id("dec.convt0.w"), 2, 1);
        x = g.add_row(x, bound.id("dec.convt0.b"));
        x = g.silu(x);
        x = g.conv_transpose1d(x, bound.id("dec.convt1.w"), 2, 1);
        x = g.add_row(x, bound.id("dec.convt1.b"));
        x = g.silu(x);
        muc_core::linear_apply(g, bound, "dec.out", x)
    }

    fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        let mut frozen = self.params.clone();
        for name in frozen.names().cloned().collect::<Vec<_>>() {
            frozen.get_mut(&name).requires_grad = false;
        }
        frozen.bind(g)
    }

    /// Deterministic inference encode of a raw log-mel matrix.
    pub fn encode(&self, mel: &Tensor<T>) -> Result<(Latent<T>, Tensor<T>)> {
        if mel.numel() == 0 {
            return Err(CodecError::Config("empty mel input".into()));
        }
        let padded = self.pad_frames(mel);
        let norm = self.normalize(&padded);
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let mel_id = g.constant(norm);
        let (mu, logvar) = self.encode_graph(&mut g, &bound, mel_id);
        Ok((
            Latent { data: g.value(mu).clone(), time_factor: self.cfg.time_factor },
            g.value(logvar).clone(),
        ))
    }

    /// Inference decode of a latent to a raw log-mel spectrogram.
    pub fn decode(&self, z: &Latent<T>, sample_rate: u32) -> MelSpec<T>
    where
        T: Sample,
    {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let z_id = g.constant(z.data.clone());
        let out = self.decode_graph(&mut g, &bound, z_id);
        let frames = self.denormalize(g.value(out));
        MelSpec {
            frames,
            hop: 240,
            sample_rate,
            n_mels: self.cfg.n_mels,
            n_fft: 1024,
        }
    }
}

/// KL(N(mu, sigma²) ‖ N(0, 1)) summed over entries:
/// ½ Σ (mu² + sigma² − 1 − log sigma²).
pub fn kl_divergence_node<T: Scalar>(g: &mut Graph<T>, mu: NodeId, logvar: NodeId) -> NodeId {
    let mu2 = g.mul(mu, mu);
    let var = g.exp(logvar);
    let sum = g.add(mu2, var);
    let sum = g.sub(sum, logvar);
    let sum = g.add_scalar(sum, T::f(-1.0));
    let total = g.sum_all(sum);
    g.scale(total, T::f(0.5))
}

pub struct VaeStepOutput<T> {
    pub loss: f64,
    pub recon_l1: f64,
    pub kl: f64,
    pub grads: indexmap::IndexMap<String, Tensor<T>>,
}

/// One reparameterized training step over raw mel segments:
/// L1(mel, decode(mu + sigma·eps)) + beta · KL / numel(latent).
pub fn vae_train_step<T: Scalar>(
    model: &MelVae<T>,
    mel_batch: &[Tensor<T>],
    rng: &mut ChaCha8Rng,
) -> Result<VaeStepOutput<T>> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let mut total: Option<NodeId> = None;
    let mut recon_sum = 0.0;
    let mut kl_sum = 0.0;
    for mel in mel_batch {
        let padded = model.pad_frames(mel);
        let norm = model.normalize(&padded);
        let mel_id = g.constant(norm.clone());
        let (mu, logvar) = model.encode_graph(&mut g, &bound, mel_id);
        let half = g.scale(logvar, T::f(0.5));
        let sigma = g.exp(half);
        let eps = g.constant(Tensor::randn(g.shape(mu).to_vec(), rng));
        let noise = g.mul(sigma, eps);
        let z = g.add(mu, noise);
        let dec = model.decode_graph(&mut g, &bound, z);
        let target = g.constant(norm);
        let recon = muc_core::l1_loss(&mut g, dec, target);
        let kl = kl_divergence_node(&mut g, mu, logvar);
        let latent_numel = g.value(mu).numel() as f64;
        let kl_mean = g.scale(kl, T::f(1.0 / latent_numel));
        let weighted = g.scale(kl_mean, T::f(model.cfg.beta));
        let item = g.add(recon, weighted);
        recon_sum += g.value(recon).item().to64();
        kl_sum += g.value(kl_mean).item().to64();
        total = Some(match total {
            Some(acc) => g.add(acc, item),
            None => item,
        });
    }
    let total = total.ok_or_else(|| CodecError::Config("empty batch".into()))?;
    let total = g.scale(total, T::f(1.0 / mel_batch.len() as f64));
    let loss = g.value(total).item().to64();
    if !loss.is_finite() {
        return Err(CodecError::Diverged(format!("vae loss {loss}")));
    }
    let grads = g.backward(total)?;
    Ok(VaeStepOutput {
        loss,
        recon_l1: recon_sum / mel_batch.len() as f64,
        kl: kl_sum / mel_batch.len() as f64,
        grads: bound.grads(&g, &grads),
    })
}

pub const VAE_KIND: &str = "melvae";

pub fn save<T: Scalar>(path: &Path, model: &MelVae<T>) -> Result<()> {
    let meta = serde_json::json!({ "kind": VAE_KIND, "config": model.cfg });
    save_model(path, &model.params, &model.buffers, meta)
}

pub fn load<T: Scalar>(path: &Path) -> Result<MelVae<T>> {
    let (params, buffers, meta) = load_model(path)?;
    let cfg: VaeConfig = meta_config(&meta, VAE_KIND)?;
    cfg.validate()?;
    Ok(MelVae { cfg, params, buffers })
}
