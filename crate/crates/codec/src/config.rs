//! Plain-text key=value pipeline configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use muc_core::Dtype;

use crate::bitstream::{bits_per_frame, ConfigId};
use crate::error::{CodecError, Result};
use crate::flowgen::SamplerConfig;
use crate::melvae::VaeConfig;
use crate::muencoder::MuEncoderConfig;

pub const TOKEN_RATE: u16 = 25;

/// Flow-model geometry (the desk default; the reference preset selects
/// 24 layers with 72-wide heads and 32 norm groups).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DitParams {
    pub n_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub norm_groups: usize,
}

impl Default for DitParams {
    fn default() -> Self {
        DitParams { n_layers: 6, heads: 4, head_dim: 16, norm_groups: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub batch: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub vae_steps: usize,
    pub flow_steps: usize,
    pub rvq_epochs: usize,
    pub rvq_batch_frames: usize,
    pub ctc_weight: f64,
    pub lr_encoder: f64,
    pub lr_vae: f64,
    pub lr_flow: f64,
    pub cond_drop: f64,
    pub grad_clip: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            batch: 3,
            stage1_steps: 140,
            stage2_steps: 180,
            vae_steps: 400,
            flow_steps: 700,
            rvq_epochs: 4,
            rvq_batch_frames: 2048,
            ctc_weight: 0.2,
            lr_encoder: 8e-4,
            lr_vae: 1.5e-3,
            lr_flow: 1.2e-3,
            cond_drop: 0.1,
            grad_clip: 1.0,
        }
    }
}

/// Everything the CLI pipeline needs: preset, rates, checkpoint locations,
/// sampler overrides, corpus geometry, and training budgets.
#[derive(Debug, Clone)]
pub struct Config {
    pub preset: ConfigId,
    pub sample_rate: u32,
    pub dtype: Dtype,
    pub seed: u64,
    pub ckpt_dir: PathBuf,
    pub corpus_dir: PathBuf,
    pub block_len: u16,
    pub griffin_lim_iters: usize,
    pub sampler: SamplerConfig,
    pub corpus_train: usize,
    pub corpus_dev: usize,
    pub corpus_test: usize,
    pub segment_s: f64,
    pub encoder: MuEncoderConfig,
    pub vae: VaeConfig,
    pub dit: DitParams,
    pub train: TrainParams,
    /// Explicit checkpoint overrides; otherwise derived from `ckpt_dir`.
    pub muencoder_ckpt: Option<PathBuf>,
    pub rvq_ckpt: Option<PathBuf>,
    pub vae_ckpt: Option<PathBuf>,
    pub flowgen_ckpt: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            preset: ConfigId::Low,
            sample_rate: 24000,
            dtype: Dtype::F32,
            seed: 0,
            ckpt_dir: PathBuf::from("runs/desk"),
            corpus_dir: PathBuf::from("corpus"),
            block_len: 64,
            griffin_lim_iters: 60,
            sampler: SamplerConfig::default(),
            corpus_train: 70,
            corpus_dev: 15,
            corpus_test: 15,
            segment_s: 5.12,
            encoder: MuEncoderConfig::desk(),
            vae: VaeConfig::default(),
            dit: DitParams::default(),
            train: TrainParams::default(),
            muencoder_ckpt: None,
            rvq_ckpt: None,
            vae_ckpt: None,
            flowgen_ckpt: None,
        }
    }
}

impl Config {
    pub fn muencoder_path(&self) -> PathBuf {
        self.muencoder_ckpt.clone().unwrap_or_else(|| self.ckpt_dir.join("muencoder.mck"))
    }

    pub fn muencoder_stage1_path(&self) -> PathBuf {
        self.ckpt_dir.join("muencoder_stage1.mck")
    }

    pub fn rvq_path(&self, preset: ConfigId) -> PathBuf {
        if let Some(p) = &self.rvq_ckpt {
            return p.clone();
        }
        self.ckpt_dir.join(format!("rvq_{preset}.rvq"))
    }

    pub fn vae_path(&self) -> PathBuf {
        self.vae_ckpt.clone().unwrap_or_else(|| self.ckpt_dir.join("melvae.mck"))
    }

    pub fn flowgen_path(&self, preset: ConfigId) -> PathBuf {
        if let Some(p) = &self.flowgen_ckpt {
            return p.clone();
        }
        self.ckpt_dir.join(format!("flowgen_{preset}.mck"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.corpus_dir.join("manifest.tsv")
    }

    pub fn log_path(&self, stage: &str) -> PathBuf {
        self.ckpt_dir.join("logs").join(format!("{stage}.log"))
    }

    /// Preset geometry → (n_codebooks, codebook_size).
    pub fn preset_geometry(&self) -> (usize, usize) {
        match self.preset {
            ConfigId::Low => (1, 16384),
            ConfigId::High => (4, 10000),
            ConfigId::Custom => (1, 16384),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.vae.validate()?;
        self.sampler.validate()?;
        if self.block_len == 0 {
            return Err(CodecError::Config("block_len must be >= 1".into()));
        }
        if self.segment_s <= 0.0 {
            return Err(CodecError::Config("segment_s must be positive".into()));
        }
        if self.vae.latent_channels % self.dit.norm_groups != 0 {
            return Err(CodecError::Config(format!(
                "{} latent channels not divisible into {} norm groups",
                self.vae.latent_channels, self.dit.norm_groups
            )));
        }
        // Preset bitrates must recompute to the advertised values.
        let low = bits_per_frame(1, 16384, self.block_len);
        if low.exact_kbps(TOKEN_RATE) != 0.35 {
            return Err(CodecError::Config("low preset must be exactly 0.35 kbps".into()));
        }
        let high = bits_per_frame(4, 10000, 64);
        if (high.exact_kbps(TOKEN_RATE) - 1.3288).abs() > 1e-3 {
            return Err(CodecError::Config("high preset must be ~1.33 kbps".into()));
        }
        Ok(())
    }

    /// Parse a key=value file ('#' starts a comment); unknown keys are errors.
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CodecError::Config(format!("{}: {e}", path.display())))?;
        Self::from_str_content(&text)
    }

    pub fn from_str_content(text: &str) -> Result<Config> {
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CodecError::Config(format!("line {}: expected key=value, got `{line}`", ln + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = Config::default();
        for (k, v) in map {
            cfg.apply(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| CodecError::Config(format!("bad value for {key}: `{v}`")))
        }
        match key {
            "preset" => {
                self.preset = match value {
                    "low" => ConfigId::Low,
                    "high" => ConfigId::High,
                    other => {
                        return Err(CodecError::Config(format!("unknown preset `{other}`")))
                    }
                }
            }
            "sample_rate" => self.sample_rate = num(key, value)?,
            "dtype" => {
                self.dtype = match value {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    other => return Err(CodecError::Config(format!("unknown dtype `{other}`"))),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "ckpt_dir" => self.ckpt_dir = PathBuf::from(value),
            "corpus_dir" => self.corpus_dir = PathBuf::from(value),
            "block_len" => self.block_len = num(key, value)?,
            "griffin_lim_iters" => self.griffin_lim_iters = num(key, value)?,
            "sampler.steps" => self.sampler.n_steps = num(key, value)?,
            "sampler.guidance" => self.sampler.guidance_scale = num(key, value)?,
            "corpus.train" => self.corpus_train = num(key, value)?,
            "corpus.dev" => self.corpus_dev = num(key, value)?,
            "corpus.test" => self.corpus_test = num(key, value)?,
            "corpus.segment_s" => self.segment_s = num(key, value)?,
            "enc.layers" => self.encoder.n_layers = num(key, value)?,
            "enc.dim" => self.encoder.model_dim = num(key, value)?,
            "enc.heads" => self.encoder.heads = num(key, value)?,
            "enc.kernel" => self.encoder.conv_kernel = num(key, value)?,
            "enc.tap" => self.encoder.tap_layer = num(key, value)?,
            "vae.latent_channels" => self.vae.latent_channels = num(key, value)?,
            "dit.layers" => self.dit.n_layers = num(key, value)?,
            "dit.heads" => self.dit.heads = num(key, value)?,
            "dit.head_dim" => self.dit.head_dim = num(key, value)?,
            "dit.norm_groups" => self.dit.norm_groups = num(key, value)?,
            "vae.hidden" => self.vae.hidden = num(key, value)?,
            "vae.beta" => self.vae.beta = num(key, value)?,
            "train.batch" => self.train.batch = num(key, value)?,
            "train.stage1_steps" => self.train.stage1_steps = num(key, value)?,
            "train.stage2_steps" => self.train.stage2_steps = num(key, value)?,
            "train.vae_steps" => self.train.vae_steps = num(key, value)?,
            "train.flow_steps" => self.train.flow_steps = num(key, value)?,
            "train.rvq_epochs" => self.train.rvq_epochs = num(key, value)?,
            "train.ctc_weight" => self.train.ctc_weight = num(key, value)?,
            "train.lr_encoder" => self.train.lr_encoder = num(key, value)?,
            "train.lr_vae" => self.train.lr_vae = num(key, value)?,
            "train.lr_flow" => self.train.lr_flow = num(key, value)?,
            "train.cond_drop" => self.train.cond_drop = num(key, value)?,
            "muencoder_ckpt" => self.muencoder_ckpt = Some(PathBuf::from(value)),
            "rvq_ckpt" => self.rvq_ckpt = Some(PathBuf::from(value)),
            "vae_ckpt" => self.vae_ckpt = Some(PathBuf::from(value)),
            "flowgen_ckpt" => self.flowgen_ckpt = Some(PathBuf::from(value)),
            other => return Err(CodecError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn parses_key_value_text_with_comments() {
        let cfg = Config::from_str_content(
            "# codec settings\npreset = high\nseed=42\nsampler.steps=25 # fast preview\n",
        )
        .unwrap();
        assert_eq!(cfg.preset, ConfigId::High);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.sampler.n_steps, 25);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_str_content("presett=low\n").is_err());
        assert!(Config::from_str_content("preset low\n").is_err());
    }

    #[test]
    fn preset_paths_derive_from_ckpt_dir() {
        let cfg = Config::default();
        assert!(cfg.rvq_path(ConfigId::Low).ends_with("rvq_low.rvq"));
        assert!(cfg.rvq_path(ConfigId::High).ends_with("rvq_high.rvq"));
        assert!(cfg.flowgen_path(ConfigId::High).ends_with("flowgen_high.mck"));
    }
}
