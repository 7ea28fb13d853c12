//! Pseudo constant-Q features: a fixed log-frequency triangular filterbank
//! applied to zero-padded FFT frames, log-compressed like the mel front-end.

use muc_core::Tensor;

use crate::audio::AudioBuffer;
use crate::error::{DspError, Result};
use crate::mel::apply_log_filterbank;
use crate::stft::StftPlan;
use crate::Sample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CqtConfig {
    pub bins_per_octave: usize,
    pub fmin: f64,
    pub n_bins: usize,
    /// Analysis window length in samples (zero-padded to `n_fft`).
    pub win_len: usize,
    /// FFT size; larger than `win_len` for finer frequency sampling.
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for CqtConfig {
    fn default() -> Self {
        // C1 at 32.70 Hz, 7 octaves of semitone bins, frame rate matched to
        // the mel front-end.
        CqtConfig { bins_per_octave: 12, fmin: 32.70, n_bins: 84, win_len: 2048, n_fft: 8192, hop: 240 }
    }
}

impl CqtConfig {
    pub fn bin_center_hz(&self, k: usize) -> f64 {
        self.fmin * 2f64.powf(k as f64 / self.bins_per_octave as f64)
    }
}

/// Log-magnitude constant-Q spectrogram (frames × n_bins).
#[derive(Debug, Clone, PartialEq)]
pub struct CqtSpec<T> {
    pub frames: Tensor<T>,
    pub bins_per_octave: usize,
    pub fmin: f64,
    pub hop: usize,
    pub sample_rate: u32,
}

impl<T: Sample> CqtSpec<T> {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_bins(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn truncated(&self, n_frames: usize) -> Self {
        assert!(n_frames <= self.n_frames());
        let width = self.frames.shape()[1];
        let data = self.frames.data()[..n_frames * width].to_vec();
        CqtSpec { frames: Tensor::from_vec(vec![n_frames, width], data), ..self.clone() }
    }
}

/// Triangular filters with geometrically spaced centers, unit row sums.
pub fn cqt_filterbank<T: Sample>(cfg: &CqtConfig, sample_rate: u32) -> Result<Tensor<T>> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = cfg.fmin * 2f64.powf(cfg.n_bins as f64 / cfg.bins_per_octave as f64);
    if top > nyquist {
        return Err(DspError::InvalidArg(format!(
            "cqt top frequency {top:.1} Hz above Nyquist {nyquist:.1} Hz"
        )));
    }
    let n_fft_bins = cfg.n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    let ratio = 2f64.powf(1.0 / cfg.bins_per_octave as f64);
    let mut fb = Tensor::zeros(vec![cfg.n_bins, n_fft_bins]);
    for m in 0..cfg.n_bins {
        let mid = cfg.bin_center_hz(m);
        let lo = mid / ratio;
        let hi = mid * ratio;
        let mut sum = 0.0;
        let mut any = false;
        for k in 0..n_fft_bins {
            let f = k as f64 * bin_hz;
            let w = if f >= lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                fb.data_mut()[m * n_fft_bins + k] = T::f(w);
                sum += w;
                any = true;
            }
        }
        if !any {
            // Filter narrower than the FFT grid; pin to the nearest bin.
            let k = (mid / bin_hz).round() as usize;
            fb.data_mut()[m * n_fft_bins + k.min(n_fft_bins - 1)] = T::one();
            sum = 1.0;
        }
        let inv = T::f(1.0 / sum);
        for k in 0..n_fft_bins {
            let v = fb.at2(m, k);
            fb.data_mut()[m * n_fft_bins + k] = v * inv;
        }
    }
    Ok(fb)
}

pub fn cqt_cfg<T: Sample>(audio: &AudioBuffer<T>, cfg: &CqtConfig) -> Result<CqtSpec<T>> {
    if audio.channels() != 1 {
        return Err(DspError::InvalidAudio("cqt expects mono input".into()));
    }
    let fb = cqt_filterbank::<T>(cfg, audio.sample_rate())?;
    let plan = StftPlan::with_window(cfg.n_fft, cfg.hop, cfg.win_len)?;
    let spec = plan.analyze_audio(audio)?;
    let frames = apply_log_filterbank(&spec, &fb);
    Ok(CqtSpec {
        frames,
        bins_per_octave: cfg.bins_per_octave,
        fmin: cfg.fmin,
        hop: cfg.hop,
        sample_rate: audio.sample_rate(),
    })
}

/// Constant-Q features with desk defaults.
pub fn cqt<T: Sample>(audio: &AudioBuffer<T>) -> Result<CqtSpec<T>> {
    cqt_cfg(audio, &CqtConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mel::LOG_FLOOR;

    fn tone(f: f64, seconds: f64, sr: u32) -> AudioBuffer<f64> {
        let n = (seconds * sr as f64) as usize;
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / sr as f64).sin() * 0.5)
            .collect();
        AudioBuffer::mono(samples, sr).unwrap()
    }

    fn interior_argmax(spec: &CqtSpec<f64>) -> usize {
        let fi = spec.n_frames() / 2;
        spec.frames
            .row(fi)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    }

    #[test]
    fn silence_sits_on_the_log_floor() {
        let audio = AudioBuffer::mono(vec![0.0f64; 24000], 24000).unwrap();
        let spec = cqt(&audio).unwrap();
        for &v in spec.frames.data() {
            assert_eq!(v, LOG_FLOOR.ln());
        }
    }

    #[test]
    fn a440_lands_on_bin_45() {
        // round(12·log2(440/32.70)) = 45; 32.70·2^(45/12) = 440.0 Hz.
        let cfg = CqtConfig::default();
        let expected = (cfg.bins_per_octave as f64 * (440.0 / cfg.fmin).log2()).round() as usize;
        assert_eq!(expected, 45);
        let spec = cqt(&tone(440.0, 1.0, 24000)).unwrap();
        assert_eq!(interior_argmax(&spec), 45);
    }

    #[test]
    fn octave_shift_moves_argmax_by_twelve_bins() {
        let a = interior_argmax(&cqt(&tone(440.0, 1.0, 24000)).unwrap());
        let b = interior_argmax(&cqt(&tone(880.0, 1.0, 24000)).unwrap());
        assert_eq!(b - a, 12);
    }

    #[test]
    fn rejects_filterbank_above_nyquist() {
        let audio = AudioBuffer::mono(vec![0.0f64; 16000], 16000).unwrap();
        // 32.70·2^(96/12) = 8371 Hz > 8 kHz Nyquist at 16 kHz.
        let cfg = CqtConfig { n_bins: 96, ..CqtConfig::default() };
        assert!(cqt_cfg(&audio, &cfg).is_err());
    }
}
