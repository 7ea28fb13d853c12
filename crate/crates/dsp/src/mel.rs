//! Log-mel spectrograms over a triangular HTK-scale filterbank.

use muc_core::Tensor;

use crate::audio::AudioBuffer;
use crate::error::{DspError, Result};
use crate::stft::{Spectrogram, StftPlan};
use crate::Sample;

/// Shared log floor for every spectral feature and metric in the workspace.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// None means Nyquist.
    pub fmax: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        // Desk defaults: 24 kHz mono, 100 mel frames per second.
        MelConfig { n_fft: 1024, hop: 240, n_mels: 80, fmin: 0.0, fmax: None }
    }
}

/// Log-magnitude mel spectrogram (frames × n_mels).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec<T> {
    pub frames: Tensor<T>,
    pub hop: usize,
    pub sample_rate: u32,
    pub n_mels: usize,
    pub n_fft: usize,
}

impl<T: Sample> MelSpec<T> {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Drop trailing frames.
    pub fn truncated(&self, n_frames: usize) -> Self {
        assert!(n_frames <= self.n_frames());
        let data = self.frames.data()[..n_frames * self.n_mels].to_vec();
        MelSpec {
            frames: Tensor::from_vec(vec![n_frames, self.n_mels], data),
            ..self.clone()
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank as an (n_mels × n_bins) matrix.
pub fn mel_filterbank<T: Sample>(cfg: &MelConfig, sample_rate: u32) -> Tensor<T> {
    let n_bins = cfg.n_fft / 2 + 1;
    let fmax = cfg.fmax.unwrap_or(sample_rate as f64 / 2.0);
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    // n_mels + 2 corner frequencies, uniform on the mel axis.
    let corners: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = Tensor::zeros(vec![cfg.n_mels, n_bins]);
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (corners[m], corners[m + 1], corners[m + 2]);
        let mut any = false;
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                fb.data_mut()[m * n_bins + k] = T::f(w);
                any = true;
            }
        }
        if !any {
            // Triangle narrower than one FFT bin: pin it to the nearest bin so
            // every row keeps a positive sum.
            let k = (mid / bin_hz).round() as usize;
            fb.data_mut()[m * n_bins + k.min(n_bins - 1)] = T::one();
        }
    }
    fb
}

/// Apply a filterbank to spectrogram magnitudes and take the floored log.
pub fn apply_log_filterbank<T: Sample>(spec: &Spectrogram<T>, fb: &Tensor<T>) -> Tensor<T> {
    let (n_out, n_bins) = fb.dims2();
    assert_eq!(n_bins, spec.n_bins, "filterbank width vs spectrogram bins");
    let floor = T::f(LOG_FLOOR);
    let mags = spec.magnitudes();
    let mut out = Tensor::zeros(vec![spec.n_frames, n_out]);
    let mut fb_t = muc_core::matmul_nt(
        &Tensor::from_vec(vec![spec.n_frames, n_bins], mags),
        fb,
    );
    for v in fb_t.data_mut() {
        *v = v.max(floor).ln();
    }
    out.data_mut().copy_from_slice(fb_t.data());
    out
}

pub fn mel_spectrogram_cfg<T: Sample>(audio: &AudioBuffer<T>, cfg: &MelConfig) -> Result<MelSpec<T>> {
    if audio.channels() != 1 {
        return Err(DspError::InvalidAudio("mel_spectrogram expects mono input".into()));
    }
    let plan = StftPlan::new(cfg.n_fft, cfg.hop)?;
    let spec = plan.analyze_audio(audio)?;
    let fb = mel_filterbank::<T>(cfg, audio.sample_rate());
    let frames = apply_log_filterbank(&spec, &fb);
    Ok(MelSpec {
        frames,
        hop: cfg.hop,
        sample_rate: audio.sample_rate(),
        n_mels: cfg.n_mels,
        n_fft: cfg.n_fft,
    })
}

/// Desk-default mel spectrogram (1024/240/80 at the buffer's rate).
pub fn mel_spectrogram<T: Sample>(audio: &AudioBuffer<T>) -> Result<MelSpec<T>> {
    mel_spectrogram_cfg(audio, &MelConfig::default())
}
