//! End-to-end pipeline: encode/decode over the trained checkpoints, the
//! staged trainer, and the objective evaluation loop.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use muc_core::{AdamConfig, AdamState, Scalar, Tensor};
use muc_dsp::{
    cqt_cfg, griffin_lim, mel_spectrogram_cfg, read_wav, resample, write_wav, AudioBuffer,
    CqtConfig, MelConfig, MelSpec, Sample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitstream::{
    decode_stream, encode_stream, ConfigId, StreamHeader, HEADER_TOTAL_BYTES,
    MUC_VERSION,
};
use crate::config::{Config, TOKEN_RATE};
use crate::dataset::{
    build_corpus, parse_transcript, BatchStream, CorpusManifest, Segment, Split, VOCAB_SIZE,
};
use crate::error::{CodecError, Result};
use crate::eval::{
    frame_labels, log_spectral_distance, matrix_mse, mel_distortion, ClipRecord, EvalReport,
};
use crate::flowgen::{
    check_condition_dim, fm_train_step, sample_euler_cfg, DitConfig, DitModel, SamplerConfig,
};
use crate::melvae::{vae_train_step, Latent, MelVae};
use crate::muencoder::{
    column_stats, mlm_step, stage2_step, tap, MuEncoder, Stage2Item, Stage2Weights,
};
use crate::rvq::{codebook_stats, dequantize, quantize, CodeSeq, Codebooks, RvqConfig};

/// Mel analysis geometry for a sample rate: 100 frames/s so the encoder's
/// 4× downsampling lands exactly on the 25 Hz token rate.
pub fn mel_config_for(sample_rate: u32) -> MelConfig {
    MelConfig {
        n_fft: if sample_rate >= 48000 { 2048 } else { 1024 },
        hop: (sample_rate / 100) as usize,
        n_mels: 80,
        fmin: 0.0,
        fmax: None,
    }
}

pub fn cqt_config_for(sample_rate: u32) -> CqtConfig {
    CqtConfig { hop: (sample_rate / 100) as usize, ..CqtConfig::default() }
}

/// Canonical token frame count for a clip: round(duration · 25), at least 1.
pub fn target_token_frames(n_samples: usize, sample_rate: u32) -> usize {
    let dur = n_samples as f64 / sample_rate as f64;
    ((dur * TOKEN_RATE as f64).round() as usize).max(1)
}

/// Crop or pad (repeating the last frame) a mel matrix to exactly `frames`.
pub fn fit_frames<T: Scalar>(mel: &Tensor<T>, frames: usize) -> Tensor<T> {
    let (t, d) = mel.dims2();
    if t == frames {
        return mel.clone();
    }
    if t > frames {
        return Tensor::from_vec(vec![frames, d], mel.data()[..frames * d].to_vec());
    }
    let mut data = mel.data().to_vec();
    for _ in t..frames {
        data.extend_from_slice(mel.row(t - 1));
    }
    Tensor::from_vec(vec![frames, d], data)
}

// ── Checkpoint bundle ───────────────────────────────────────────────

pub struct Checkpoints<T> {
    pub encoder: MuEncoder<T>,
    pub books: Codebooks<T>,
    pub vae: MelVae<T>,
    pub flow: DitModel<T>,
}

/// Load all four checkpoints for a preset and verify they agree on the data
/// geometry (feature dim, latent channels, condition dim, preset id).
pub fn load_pipeline<T: Scalar>(cfg: &Config) -> Result<Checkpoints<T>> {
    let encoder = crate::muencoder::load::<T>(&cfg.muencoder_path())
        .map_err(|e| e.in_stage("muencoder"))?;
    let books = crate::rvq::load_codebooks::<T>(&cfg.rvq_path(cfg.preset))
        .map_err(|e| e.in_stage("rvq"))?;
    let vae = crate::melvae::load::<T>(&cfg.vae_path()).map_err(|e| e.in_stage("melvae"))?;
    let flow =
        crate::flowgen::load::<T>(&cfg.flowgen_path(cfg.preset)).map_err(|e| e.in_stage("flowgen"))?;

    if books.cfg.dim != encoder.cfg.model_dim {
        return Err(CodecError::CheckpointMismatch(format!(
            "rvq dim {} vs muencoder dim {}",
            books.cfg.dim, encoder.cfg.model_dim
        )));
    }
    if books.cfg.config_id != cfg.preset {
        return Err(CodecError::CheckpointMismatch(format!(
            "codebook file is `{}`, config preset is `{}`",
            books.cfg.config_id, cfg.preset
        )));
    }
    check_condition_dim(&flow, books.cfg.dim)?;
    if flow.cfg.latent_channels != vae.cfg.latent_channels {
        return Err(CodecError::CheckpointMismatch(format!(
            "flowgen latent channels {} vs vae {}",
            flow.cfg.latent_channels, vae.cfg.latent_channels
        )));
    }
    Ok(Checkpoints { encoder, books, vae, flow })
}

// ── Encode ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EncodeInfo {
    pub header: StreamHeader,
    pub payload_bytes: usize,
    pub n_frames: usize,
    /// Achieved rate from actual payload bytes.
    pub kbps: f64,
}

pub fn achieved_kbps(payload_bytes: usize, n_frames: usize, channels: usize) -> f64 {
    let bits = payload_bytes as f64 * 8.0;
    let seconds = n_frames as f64 / TOKEN_RATE as f64;
    bits / seconds.max(1e-12) / 1000.0 / channels as f64
}

/// Mel (fit to the canonical frame count) for one mono channel.
fn channel_mel<T: Sample>(samples: Vec<T>, sample_rate: u32) -> Result<(MelSpec<T>, usize)> {
    let n_tok = target_token_frames(samples.len(), sample_rate);
    let audio = AudioBuffer::mono(samples, sample_rate)?;
    let mel = mel_spectrogram_cfg(&audio, &mel_config_for(sample_rate))?;
    let frames = fit_frames(&mel.frames, 4 * n_tok);
    Ok((MelSpec { frames, ..mel }, n_tok))
}

/// Encode audio to a `.muc` byte stream (codes per channel, 1:1 frame rate).
pub fn encode_audio<T: Sample>(
    audio: &AudioBuffer<T>,
    ckpts: &Checkpoints<T>,
    cfg: &Config,
) -> Result<(Vec<u8>, EncodeInfo, Vec<CodeSeq>)> {
    let audio = if audio.sample_rate() == cfg.sample_rate {
        audio.clone()
    } else {
        resample(audio, cfg.sample_rate)?
    };
    let mut codes = Vec::new();
    let mut n_tok_all = None;
    for ch in 0..audio.channels() as usize {
        let (mel, n_tok) = channel_mel(audio.channel(ch), audio.sample_rate())?;
        if let Some(prev) = n_tok_all {
            assert_eq!(prev, n_tok);
        }
        n_tok_all = Some(n_tok);
        let feats = ckpts.encoder.encode(&mel).map_err(|e| e.in_stage("muencoder"))?;
        let tapped = tap(&feats, ckpts.encoder.cfg.tap_layer)?;
        let fit = fit_frames(&tapped.data, n_tok);
        let (ch_codes, _, _) = quantize(&fit, &ckpts.books).map_err(|e| e.in_stage("rvq"))?;
        codes.push(ch_codes);
    }
    let n_frames = n_tok_all.unwrap();
    let header = StreamHeader {
        version: MUC_VERSION,
        config_id: ckpts.books.cfg.config_id,
        sample_rate: audio.sample_rate(),
        channels: audio.channels() as u8,
        token_rate: TOKEN_RATE,
        n_frames: n_frames as u32,
        n_codebooks: ckpts.books.cfg.n_codebooks as u8,
        codebook_size: ckpts.books.cfg.codebook_size as u32,
        block_len: cfg.block_len,
    };
    let bytes = encode_stream(&codes, &header).map_err(|e| e.in_stage("bitstream"))?;
    let payload_bytes = bytes.len() - HEADER_TOTAL_BYTES;
    let info = EncodeInfo {
        header,
        payload_bytes,
        n_frames,
        kbps: achieved_kbps(payload_bytes, n_frames, audio.channels() as usize),
    };
    Ok((bytes, info, codes))
}

pub fn encode_file<T: Sample>(wav: &Path, out: &Path, cfg: &Config) -> Result<EncodeInfo> {
    let audio = read_wav::<T>(wav).map_err(|e| CodecError::from(e).in_stage("wav-read"))?;
    let ckpts = load_pipeline::<T>(cfg)?;
    let (bytes, info, _) = encode_audio(&audio, &ckpts, cfg)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, bytes)?;
    Ok(info)
}

// ── Decode ──────────────────────────────────────────────────────────

/// Latent reconstruction for one channel's codes.
pub fn decode_channel_latent<T: Scalar>(
    codes: &CodeSeq,
    ckpts: &Checkpoints<T>,
    sampler: &SamplerConfig,
) -> Result<Latent<T>> {
    let cond = dequantize(codes, &ckpts.books).map_err(|e| e.in_stage("rvq"))?;
    check_condition_dim(&ckpts.flow, cond.dims2().1)?;
    let c = ckpts.flow.cfg.latent_channels;
    let latent_norm =
        sample_euler_cfg(&ckpts.flow, (codes.n_frames, c), Some(&cond), sampler)
            .map_err(|e| e.in_stage("flowgen"))?;
    // Undo latent whitening recorded at VAE training time.
    let (mean, std) = ckpts.vae.latent_stats();
    let (t, cc) = latent_norm.dims2();
    let mut data = Vec::with_capacity(t * cc);
    for fi in 0..t {
        for ci in 0..cc {
            data.push(latent_norm.at2(fi, ci) * std.data()[ci] + mean.data()[ci]);
        }
    }
    Ok(Latent { data: Tensor::from_vec(vec![t, cc], data), time_factor: 4 })
}

pub struct DecodeOutput<T> {
    pub audio: AudioBuffer<T>,
    /// Per channel: reconstructed latent and decoded mel.
    pub latents: Vec<Latent<T>>,
    pub mels: Vec<MelSpec<T>>,
    pub header: StreamHeader,
}

pub fn decode_bytes<T: Sample>(
    bytes: &[u8],
    ckpts: &Checkpoints<T>,
    cfg: &Config,
    seed: u64,
) -> Result<DecodeOutput<T>> {
    let (header, codes) = decode_stream(bytes).map_err(|e| e.in_stage("bitstream"))?;
    if header.codebook_size as usize != ckpts.books.cfg.codebook_size
        || header.n_codebooks as usize != ckpts.books.cfg.n_codebooks
        || header.config_id != ckpts.books.cfg.config_id
    {
        return Err(CodecError::CheckpointMismatch(format!(
            "stream is {}×{} ({}), codebooks are {}×{} ({})",
            header.n_codebooks,
            header.codebook_size,
            header.config_id,
            ckpts.books.cfg.n_codebooks,
            ckpts.books.cfg.codebook_size,
            ckpts.books.cfg.config_id,
        )));
    }
    let mut sampler = ckpts.flow.sampler_defaults;
    sampler.n_steps = cfg.sampler.n_steps;
    sampler.guidance_scale = cfg.sampler.guidance_scale;
    let mut channels = Vec::new();
    let mut latents = Vec::new();
    let mut mels = Vec::new();
    for (ch, ch_codes) in codes.iter().enumerate() {
        let ch_sampler = SamplerConfig { seed: seed ^ ((ch as u64) << 32), ..sampler };
        let latent = decode_channel_latent(ch_codes, ckpts, &ch_sampler)?;
        let mel = ckpts.vae.decode(&latent, header.sample_rate);
        let audio = griffin_lim(&mel, cfg.griffin_lim_iters)
            .map_err(|e| CodecError::from(e).in_stage("griffin-lim"))?;
        channels.push(audio.samples().to_vec());
        latents.push(latent);
        mels.push(mel);
    }
    let audio = AudioBuffer::from_channels(&channels, header.sample_rate)?;
    Ok(DecodeOutput { audio, latents, mels, header })
}

pub fn decode_file<T: Sample>(muc: &Path, out: &Path, cfg: &Config, seed: u64) -> Result<()> {
    let bytes = fs::read(muc)?;
    let ckpts = load_pipeline::<T>(cfg)?;
    let decoded = decode_bytes(&bytes, &ckpts, cfg, seed)?;
    write_wav(out, &decoded.audio).map_err(|e| CodecError::from(e).in_stage("wav-write"))?;
    Ok(())
}

/// Header summary of a `.muc` file.
pub fn stream_info(path: &Path) -> Result<(StreamHeader, usize, f64)> {
    let bytes = fs::read(path)?;
    let header = StreamHeader::from_bytes(&bytes)?;
    let payload = bytes.len().saturating_sub(HEADER_TOTAL_BYTES);
    let kbps = achieved_kbps(payload, header.n_frames as usize, header.channels as usize);
    Ok((header, payload, kbps))
}

/// Uniform random codes for the baseline comparison.
pub fn random_codes(template: &CodeSeq, seed: u64) -> CodeSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data =
        (0..template.n_frames * template.n_codebooks)
            .map(|_| rng.gen_range(0..template.codebook_size))
            .collect();
    CodeSeq::new(
        data,
        template.n_frames,
        template.n_codebooks,
        template.codebook_size,
        template.config_id,
    )
}

// ── Training ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Muencoder1,
    Muencoder2,
    Rvq,
    Vae,
    Flowgen,
}

impl Stage {
    pub fn all() -> Vec<Stage> {
        vec![Stage::Muencoder1, Stage::Muencoder2, Stage::Rvq, Stage::Vae, Stage::Flowgen]
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Muencoder1 => "muencoder1",
            Stage::Muencoder2 => "muencoder2",
            Stage::Rvq => "rvq",
            Stage::Vae => "vae",
            Stage::Flowgen => "flowgen",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "muencoder1" | "stage1" => Ok(Stage::Muencoder1),
            "muencoder2" | "stage2" => Ok(Stage::Muencoder2),
            "rvq" => Ok(Stage::Rvq),
            "vae" => Ok(Stage::Vae),
            "flowgen" | "flow" => Ok(Stage::Flowgen),
            other => Err(CodecError::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// Exclusive training lock on a checkpoint directory.
pub struct TrainLock {
    path: PathBuf,
}

impl TrainLock {
    pub fn acquire(dir: &Path) -> Result<TrainLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(TrainLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CodecError::Config(
                format!("checkpoint dir is locked by another trainer ({})", path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for TrainLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_log(cfg: &Config, stage: &str, losses: &[f64]) -> Result<()> {
    let path = cfg.log_path(stage);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(&path)?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{i}\t{l}")?;
    }
    Ok(())
}

/// Generate the synthetic corpus if its manifest is missing.
pub fn ensure_corpus<T: Sample>(cfg: &Config) -> Result<CorpusManifest> {
    let manifest_path = cfg.manifest_path();
    if manifest_path.exists() {
        return CorpusManifest::load(&manifest_path, &cfg.corpus_dir);
    }
    build_corpus::<T>(
        &cfg.corpus_dir,
        cfg.corpus_train,
        cfg.corpus_dev,
        cfg.corpus_test,
        cfg.sample_rate,
        cfg.seed,
    )
}

/// Raw mel+cqt segments fit to the canonical frame count.
fn segment_features<T: Sample>(
    seg: &Segment<T>,
    sample_rate: u32,
    with_cqt: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let n_tok = target_token_frames(seg.audio.len_frames(), sample_rate);
    let mel = mel_spectrogram_cfg(&seg.audio, &mel_config_for(sample_rate))?;
    let mel_fit = fit_frames(&mel.frames, 4 * n_tok);
    let cqt_fit = if with_cqt {
        let c = cqt_cfg(&seg.audio, &cqt_config_for(sample_rate))?;
        Some(fit_frames(&c.frames, 4 * n_tok))
    } else {
        None
    };
    Ok((mel_fit, cqt_fit))
}

/// Column stats of mel and cqt over a sample of training segments.
fn compute_norm_stats<T: Sample>(
    manifest: &CorpusManifest,
    cfg: &Config,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut stream = BatchStream::<T>::new(
        manifest,
        &cfg.corpus_dir,
        Split::Train,
        1,
        cfg.segment_s,
        cfg.seed ^ 0x57A75,
    )?;
    let mut mels = Vec::new();
    let mut cqts = Vec::new();
    for _ in 0..24 {
        let batch = stream.next_batch()?.expect("train stream cycles");
        let (mel, cqt) = segment_features(&batch[0], cfg.sample_rate, true)?;
        mels.push(mel);
        cqts.push(cqt.unwrap());
    }
    let mel_refs: Vec<&Tensor<T>> = mels.iter().collect();
    let (mel_mean, mel_std) = column_stats(&mel_refs);
    let cqt_refs: Vec<&Tensor<T>> = cqts.iter().collect();
    let (cqt_mean, cqt_std) = column_stats(&cqt_refs);
    Ok((mel_mean, mel_std, cqt_mean, cqt_std))
}

fn stage_muencoder1<T: Sample>(cfg: &Config, manifest: &CorpusManifest) -> Result<()> {
    let mut model = MuEncoder::<T>::new(cfg.encoder, cfg.seed ^ 0xE1)?;
    let (mm, ms, cm, cs) = compute_norm_stats::<T>(manifest, cfg)?;
    model.set_norm_stats(mm, ms, cm, cs);

    let mut stream = BatchStream::<T>::new(
        manifest,
        &cfg.corpus_dir,
        Split::Train,
        cfg.train.batch,
        cfg.segment_s,
        cfg.seed ^ 0x51,
    )?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.train.lr_encoder));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x52);
    let mut losses = Vec::new();
    for step in 0..cfg.train.stage1_steps {
        let batch = stream.next_batch()?.expect("train stream cycles");
        let mut mels = Vec::with_capacity(batch.len());
        for seg in &batch {
            let (mel, _) = segment_features(seg, cfg.sample_rate, false)?;
            mels.push(model.normalize_mel(&MelSpec {
                frames: mel,
                hop: (cfg.sample_rate / 100) as usize,
                sample_rate: cfg.sample_rate,
                n_mels: cfg.encoder.n_mels,
                n_fft: mel_config_for(cfg.sample_rate).n_fft,
            }));
        }
        let out = mlm_step(&model, &mels, &mut rng)?;
        let mut grads = out.grads;
        muc_core::clip_grad_norm(&mut grads, cfg.train.grad_clip);
        adam.step(&mut model.params, &grads)?;
        losses.push(out.loss);
        if step % 20 == 0 {
            eprintln!("[muencoder1] step {step}: mlm loss {:.4}", out.loss);
        }
    }
    write_log(cfg, "muencoder1", &losses)?;
    crate::muencoder::save(&cfg.muencoder_stage1_path(), &model, serde_json::json!({"stage": 1}))
}

fn stage_muencoder2<T: Sample>(cfg: &Config, manifest: &CorpusManifest) -> Result<()> {
    let s1 = cfg.muencoder_stage1_path();
    if !s1.exists() {
        return Err(CodecError::MissingStage {
            stage: "muencoder2".into(),
            missing: "muencoder1".into(),
        });
    }
    let mut model = crate::muencoder::load::<T>(&s1)?;
    let weights =
        Stage2Weights { reconstruction: 1.0, lyrics: cfg.train.ctc_weight };

    let mut stream = BatchStream::<T>::new(
        manifest,
        &cfg.corpus_dir,
        Split::Train,
        cfg.train.batch,
        cfg.segment_s,
        cfg.seed ^ 0x61,
    )?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.train.lr_encoder));
    let mut losses = Vec::new();
    for step in 0..cfg.train.stage2_steps {
        let batch = stream.next_batch()?.expect("train stream cycles");
        let mut items = Vec::with_capacity(batch.len());
        for seg in &batch {
            let (mel, cqt) = segment_features(seg, cfg.sample_rate, true)?;
            items.push(Stage2Item { mel, cqt: cqt.unwrap(), symbols: seg.symbols.clone() });
        }
        let out = stage2_step(&model, &items, weights)?;
        let mut grads = out.grads;
        muc_core::clip_grad_norm(&mut grads, cfg.train.grad_clip);
        adam.step(&mut model.params, &grads)?;
        losses.push(out.total);
        if step % 20 == 0 {
            eprintln!(
                "[muencoder2] step {step}: total {:.4} mel {:.4} cqt {:.4} ctc {:.4}",
                out.total, out.mel_recon, out.cqt_recon, out.ctc
            );
        }
    }
    write_log(cfg, "muencoder2", &losses)?;
    crate::muencoder::save(&cfg.muencoder_path(), &model, serde_json::json!({"stage": 2}))
}

/// Tapped features for every clip of a split (canonical frame counts).
pub fn extract_features<T: Sample>(
    cfg: &Config,
    encoder: &MuEncoder<T>,
    manifest: &CorpusManifest,
    split: Split,
) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::new();
    for rec in manifest.split(split) {
        let audio = read_wav::<T>(&cfg.corpus_dir.join(&rec.path))?;
        let (mel, n_tok) = channel_mel(audio.channel(0), audio.sample_rate())?;
        let feats = encoder.encode(&mel)?;
        let tapped = tap(&feats, encoder.cfg.tap_layer)?;
        out.push((rec.id.clone(), fit_frames(&tapped.data, n_tok)));
    }
    Ok(out)
}

fn stage_rvq<T: Sample>(cfg: &Config, manifest: &CorpusManifest) -> Result<()> {
    let enc_path = cfg.muencoder_path();
    if !enc_path.exists() {
        return Err(CodecError::MissingStage { stage: "rvq".into(), missing: "muencoder2".into() });
    }
    let encoder = crate::muencoder::load::<T>(&enc_path)?;
    let feats = extract_features(cfg, &encoder, manifest, Split::Train)?;
    let dim = encoder.cfg.model_dim;
    let mut rows: Vec<T> = Vec::new();
    let mut n = 0usize;
    for (_, f) in &feats {
        rows.extend_from_slice(f.data());
        n += f.dims2().0;
    }
    let all = Tensor::from_vec(vec![n, dim], rows);

    for preset in [ConfigId::Low, ConfigId::High] {
        let rvq_cfg = match preset {
            ConfigId::Low => RvqConfig::low(dim),
            ConfigId::High => RvqConfig::high(dim),
            ConfigId::Custom => unreachable!(),
        };
        let mut log = Vec::new();
        let books = crate::rvq::train(
            &all,
            rvq_cfg,
            cfg.train.rvq_epochs,
            cfg.train.rvq_batch_frames,
            cfg.seed ^ 0x71,
            &mut log,
        )?;
        write_log(cfg, &format!("rvq_{preset}"), &log)?;
        crate::rvq::save_codebooks(&cfg.rvq_path(preset), &books)?;
        eprintln!("[rvq] trained {preset} codebooks on {n} frames");
    }
    Ok(())
}

fn stage_vae<T: Sample>(cfg: &Config, manifest: &CorpusManifest) -> Result<()> {
    let mut model = MelVae::<T>::new(cfg.vae, cfg.seed ^ 0x81)?;
    let (mm, ms, _, _) = compute_norm_stats::<T>(manifest, cfg)?;
    model.set_mel_stats(mm, ms);

    let mut stream = BatchStream::<T>::new(
        manifest,
        &cfg.corpus_dir,
        Split::Train,
        cfg.train.batch,
        cfg.segment_s,
        cfg.seed ^ 0x82,
    )?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.train.lr_vae));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x83);
    let mut losses = Vec::new();
    let mut last_good = model.params.clone();
    for step in 0..cfg.train.vae_steps {
        let batch = stream.next_batch()?.expect("train stream cycles");
        let mut mels = Vec::with_capacity(batch.len());
        for seg in &batch {
            let (mel, _) = segment_features(seg, cfg.sample_rate, false)?;
            mels.push(mel);
        }
        match vae_train_step(&model, &mels, &mut rng) {
            Ok(out) => {
                let mut grads = out.grads;
                muc_core::clip_grad_norm(&mut grads, cfg.train.grad_clip);
                adam.step(&mut model.params, &grads)?;
                losses.push(out.loss);
                if step % 50 == 0 {
                    eprintln!(
                        "[vae] step {step}: loss {:.4} recon {:.4} kl {:.4}",
                        out.loss, out.recon_l1, out.kl
                    );
                }
                if step % 25 == 0 {
                    last_good = model.params.clone();
                }
            }
            Err(CodecError::Diverged(msg)) => {
                model.params = last_good;
                crate::melvae::save(&cfg.vae_path(), &model)?;
                return Err(CodecError::Diverged(format!(
                    "vae at step {step}: {msg}; last good checkpoint retained"
                )));
            }
            Err(e) => return Err(e),
        }
    }

    // Latent whitening statistics over the train split.
    let mel_cfg = mel_config_for(cfg.sample_rate);
    let mut latents = Vec::new();
    for rec in manifest.split(Split::Train) {
        let audio = read_wav::<T>(&cfg.corpus_dir.join(&rec.path))?;
        let mel = mel_spectrogram_cfg(&audio, &mel_cfg)?;
        let n_tok = target_token_frames(audio.len_frames(), cfg.sample_rate);
        let fitted = fit_frames(&mel.frames, 4 * n_tok);
        let (lat, _) = model.encode(&fitted)?;
        latents.push(lat.data);
    }
    let refs: Vec<&Tensor<T>> = latents.iter().collect();
    let (mean, std) = column_stats(&refs);
    model.set_latent_stats(mean, std);

    write_log(cfg, "vae", &losses)?;
    crate::melvae::save(&cfg.vae_path(), &model)
}

fn stage_flowgen<T: Sample>(cfg: &Config, manifest: &CorpusManifest) -> Result<()> {
    let enc_path = cfg.muencoder_path();
    let vae_path = cfg.vae_path();
    if !enc_path.exists() {
        return Err(CodecError::MissingStage {
            stage: "flowgen".into(),
            missing: "muencoder2".into(),
        });
    }
    if !vae_path.exists() {
        return Err(CodecError::MissingStage { stage: "flowgen".into(), missing: "vae".into() });
    }
    let encoder = crate::muencoder::load::<T>(&enc_path)?;
    let vae = crate::melvae::load::<T>(&vae_path)?;
    let feats = extract_features(cfg, &encoder, manifest, Split::Train)?;

    // Normalized latent targets per clip.
    let (lat_mean, lat_std) = vae.latent_stats();
    let mel_cfg = mel_config_for(cfg.sample_rate);
    let mut latents: IndexMap<String, Tensor<T>> = IndexMap::new();
    for rec in manifest.split(Split::Train) {
        let audio = read_wav::<T>(&cfg.corpus_dir.join(&rec.path))?;
        let mel = mel_spectrogram_cfg(&audio, &mel_cfg)?;
        let n_tok = target_token_frames(audio.len_frames(), cfg.sample_rate);
        let fitted = fit_frames(&mel.frames, 4 * n_tok);
        let (lat, _) = vae.encode(&fitted)?;
        let (t, c) = lat.data.dims2();
        let mut norm = Tensor::zeros(vec![t, c]);
        for fi in 0..t {
            for ci in 0..c {
                norm.data_mut()[fi * c + ci] = (lat.data.at2(fi, ci) - lat_mean.data()[ci])
                    / lat_std.data()[ci].max(T::f(1e-6));
            }
        }
        latents.insert(rec.id.clone(), norm);
    }

    for preset in [ConfigId::Low, ConfigId::High] {
        let books_path = cfg.rvq_path(preset);
        if !books_path.exists() {
            return Err(CodecError::MissingStage { stage: "flowgen".into(), missing: "rvq".into() });
        }
        let books = crate::rvq::load_codebooks::<T>(&books_path)?;
        // Dequantized conditions per clip.
        let mut conds: IndexMap<String, Tensor<T>> = IndexMap::new();
        for (id, f) in &feats {
            let (_, dq, _) = quantize(f, &books)?;
            conds.insert(id.clone(), dq);
        }

        let dit_cfg = DitConfig {
            n_layers: cfg.dit.n_layers,
            heads: cfg.dit.heads,
            head_dim: cfg.dit.head_dim,
            norm_groups: cfg.dit.norm_groups,
            ..DitConfig::desk(vae.cfg.latent_channels, books.cfg.dim)
        };
        let mut model = DitModel::<T>::new(dit_cfg, cfg.seed ^ 0x91)?;
        model.sampler_defaults = SamplerConfig {
            n_steps: cfg.sampler.n_steps,
            guidance_scale: cfg.sampler.guidance_scale,
            seed: 0,
        };
        let mut adam = AdamState::new(AdamConfig::with_lr(cfg.train.lr_flow));
        // Identical draw sequence for every preset (common random numbers):
        // the low/high comparison then isolates condition quality.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x92);
        let seg_frames = (cfg.segment_s * TOKEN_RATE as f64).round() as usize;
        let ids: Vec<String> = latents.keys().cloned().collect();
        let mut losses = Vec::new();
        let mut last_good = model.params.clone();
        for step in 0..cfg.train.flow_steps {
            let mut xs = Vec::with_capacity(cfg.train.batch);
            let mut cs = Vec::with_capacity(cfg.train.batch);
            for _ in 0..cfg.train.batch {
                let id = &ids[rng.gen_range(0..ids.len())];
                let lat = &latents[id];
                let cond = &conds[id];
                let t_total = lat.dims2().0.min(cond.dims2().0);
                let take = seg_frames.min(t_total);
                let off = if t_total > take { rng.gen_range(0..=t_total - take) } else { 0 };
                let c = lat.dims2().1;
                let d = cond.dims2().1;
                xs.push(Tensor::from_vec(
                    vec![take, c],
                    lat.data()[off * c..(off + take) * c].to_vec(),
                ));
                cs.push(Tensor::from_vec(
                    vec![take, d],
                    cond.data()[off * d..(off + take) * d].to_vec(),
                ));
            }
            match fm_train_step(&model, &xs, &cs, cfg.train.cond_drop, &mut rng) {
                Ok(out) => {
                    let mut grads = out.grads;
                    muc_core::clip_grad_norm(&mut grads, cfg.train.grad_clip);
                    adam.step(&mut model.params, &grads)?;
                    losses.push(out.loss);
                    if step % 50 == 0 {
                        eprintln!("[flowgen/{preset}] step {step}: fm loss {:.4}", out.loss);
                    }
                    if step % 25 == 0 {
                        last_good = model.params.clone();
                    }
                }
                Err(CodecError::Diverged(msg)) => {
                    model.params = last_good;
                    crate::flowgen::save(&cfg.flowgen_path(preset), &model)?;
                    return Err(CodecError::Diverged(format!(
                        "flowgen/{preset} at step {step}: {msg}; last good checkpoint retained"
                    )));
                }
                Err(e) => return Err(e),
            }
        }
        write_log(cfg, &format!("flowgen_{preset}"), &losses)?;
        crate::flowgen::save(&cfg.flowgen_path(preset), &model)?;
    }
    Ok(())
}

fn stage_output_exists(cfg: &Config, stage: Stage) -> bool {
    match stage {
        Stage::Muencoder1 => cfg.muencoder_stage1_path().exists(),
        Stage::Muencoder2 => cfg.muencoder_path().exists(),
        Stage::Rvq => {
            cfg.rvq_path(ConfigId::Low).exists() && cfg.rvq_path(ConfigId::High).exists()
        }
        Stage::Vae => cfg.vae_path().exists(),
        Stage::Flowgen => {
            cfg.flowgen_path(ConfigId::Low).exists() && cfg.flowgen_path(ConfigId::High).exists()
        }
    }
}

/// Run the requested stages in dependency order. Completed stages are skipped
/// unless `overwrite` is set.
pub fn train_all<T: Sample>(cfg: &Config, stages: &[Stage], overwrite: bool) -> Result<()> {
    cfg.validate()?;
    let _lock = TrainLock::acquire(&cfg.ckpt_dir)?;
    let manifest = ensure_corpus::<T>(cfg)?;
    for stage in Stage::all() {
        if !stages.contains(&stage) {
            continue;
        }
        if !overwrite && stage_output_exists(cfg, stage) {
            eprintln!("[train] {} checkpoint present, skipping (use --overwrite)", stage.name());
            continue;
        }
        let t0 = std::time::Instant::now();
        match stage {
            Stage::Muencoder1 => stage_muencoder1::<T>(cfg, &manifest)?,
            Stage::Muencoder2 => stage_muencoder2::<T>(cfg, &manifest)?,
            Stage::Rvq => stage_rvq::<T>(cfg, &manifest)?,
            Stage::Vae => stage_vae::<T>(cfg, &manifest)?,
            Stage::Flowgen => stage_flowgen::<T>(cfg, &manifest)?,
        }
        eprintln!("[train] {} done in {:.1}s", stage.name(), t0.elapsed().as_secs_f64());
    }
    Ok(())
}

// ── Evaluation ──────────────────────────────────────────────────────

/// Evaluate one preset over a split: paired real-vs-random-code decodes,
/// spectral metrics, latent MSE, codebook statistics, achieved rate.
pub fn eval_split<T: Sample>(cfg: &Config, split: Split) -> Result<EvalReport> {
    let manifest = CorpusManifest::load(&cfg.manifest_path(), &cfg.corpus_dir)?;
    let records = manifest.split(split);
    if records.is_empty() {
        return Err(CodecError::Dataset(format!("split `{}` is empty", split.tag())));
    }
    let ckpts = load_pipeline::<T>(cfg)?;
    let mel_cfg = mel_config_for(cfg.sample_rate);
    let mut report = EvalReport::default();
    for rec in &records {
        let audio = read_wav::<T>(&cfg.corpus_dir.join(&rec.path))?;
        let (bytes, info, codes) = encode_audio(&audio, &ckpts, cfg)?;
        let clip_seed = cfg.seed ^ fxhash(&rec.id);

        let decoded = decode_bytes(&bytes, &ckpts, cfg, clip_seed)?;
        let ref_mel = mel_spectrogram_cfg(&audio, &mel_cfg)?;
        let ref_mel_fit = fit_frames(&ref_mel.frames, 4 * info.n_frames);
        let md = mel_distortion(&ref_mel_fit, &decoded.mels[0].frames);
        let lsd = log_spectral_distance(&audio, &decoded.audio)?;

        // Random-code baseline: same sampler seed, scrambled condition.
        let rand_seq = random_codes(&codes[0], clip_seed ^ 0xBAD);
        let rand_header = StreamHeader { ..info.header.clone() };
        let rand_bytes = encode_stream(std::slice::from_ref(&rand_seq), &rand_header)?;
        let rand_decoded = decode_bytes(&rand_bytes, &ckpts, cfg, clip_seed)?;
        let md_rand = mel_distortion(&ref_mel_fit, &rand_decoded.mels[0].frames);

        // Latent MSE against the VAE encoding of the reference mel.
        let (ref_lat, _) = ckpts.vae.encode(&ref_mel_fit)?;
        let lat_mse = matrix_mse(&ref_lat.data, &decoded.latents[0].data);

        report.clips.push(ClipRecord {
            record: "clip".into(),
            clip_id: rec.id.clone(),
            preset: cfg.preset.to_string(),
            kbps: info.kbps,
            lsd_db: lsd,
            mel_distortion: md,
            mel_distortion_random: md_rand,
            latent_mse: lat_mse,
            stage_stats: codebook_stats(&codes[0])?,
        });
    }
    report.aggregates.push(EvalReport::aggregate(&cfg.preset.to_string(), &report.clips));
    Ok(report)
}

fn fxhash(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Tapped features with frame-level symbol labels for the linear probe.
pub fn probe_dataset<T: Sample>(
    cfg: &Config,
    encoder: &MuEncoder<T>,
    manifest: &CorpusManifest,
    split: Split,
) -> Result<Vec<(Tensor<T>, Vec<usize>)>> {
    let mut out = Vec::new();
    for rec in manifest.split(split) {
        let audio = read_wav::<T>(&cfg.corpus_dir.join(&rec.path))?;
        let duration = audio.duration_s();
        let (mel, n_tok) = channel_mel(audio.channel(0), audio.sample_rate())?;
        let feats = encoder.encode(&mel)?;
        let tapped = tap(&feats, encoder.cfg.tap_layer)?;
        let fit = fit_frames(&tapped.data, n_tok);
        let symbols = parse_transcript(&rec.transcript)?;
        let labels = frame_labels(&symbols, duration, n_tok, TOKEN_RATE as f64, VOCAB_SIZE);
        out.push((fit, labels));
    }
    Ok(out)
}
