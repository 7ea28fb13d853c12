//! Short-time Fourier analysis/synthesis with Hann windows and centered,
//! zero-padded frames: frame `i` is centered on sample `i·hop`, giving
//! `floor(n/hop) + 1` frames.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::AudioBuffer;
use crate::error::{DspError, Result};
use crate::Sample;

/// One-sided complex spectrogram (n_frames × n_fft/2+1).
#[derive(Debug, Clone)]
pub struct Spectrogram<T> {
    pub bins: Vec<Complex<T>>,
    pub n_frames: usize,
    pub n_bins: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl<T: Sample> Spectrogram<T> {
    pub fn bin(&self, frame: usize, k: usize) -> Complex<T> {
        self.bins[frame * self.n_bins + k]
    }

    pub fn magnitude(&self, frame: usize, k: usize) -> T {
        self.bin(frame, k).norm()
    }

    pub fn magnitudes(&self) -> Vec<T> {
        self.bins.iter().map(|c| c.norm()).collect()
    }
}

pub fn hann_window<T: Sample>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let x = std::f64::consts::PI * i as f64 / n as f64;
            T::f(x.sin() * x.sin())
        })
        .collect()
}

/// Reusable FFT plan for one (n_fft, hop) configuration.
pub struct StftPlan<T: Sample> {
    pub n_fft: usize,
    pub hop: usize,
    /// Analysis window of `win_len` samples, centered in the n_fft frame.
    pub win_len: usize,
    window: Vec<T>,
    fft: Arc<dyn Fft<T>>,
    ifft: Arc<dyn Fft<T>>,
}

impl<T: Sample> StftPlan<T> {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        Self::with_window(n_fft, hop, n_fft)
    }

    /// A window shorter than n_fft is zero-padded symmetrically (used by the
    /// constant-Q front-end for finer frequency sampling).
    pub fn with_window(n_fft: usize, hop: usize, win_len: usize) -> Result<Self> {
        if !n_fft.is_power_of_two() {
            return Err(DspError::InvalidArg(format!("n_fft {n_fft} must be a power of two")));
        }
        if hop == 0 || hop > n_fft {
            return Err(DspError::InvalidArg(format!("hop {hop} must be in 1..=n_fft")));
        }
        if win_len > n_fft {
            return Err(DspError::InvalidArg("window longer than n_fft".into()));
        }
        let mut planner = FftPlanner::new();
        Ok(StftPlan {
            n_fft,
            hop,
            win_len,
            window: hann_window(win_len),
            fft: planner.plan_fft_forward(n_fft),
            ifft: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples / self.hop + 1
    }

    /// Analyze a mono signal.
    pub fn analyze(&self, samples: &[T], sample_rate: u32) -> Result<Spectrogram<T>> {
        if samples.is_empty() {
            return Err(DspError::EmptyAudio);
        }
        let n_frames = self.n_frames(samples.len());
        let n_bins = self.n_bins();
        let mut bins = vec![Complex::new(T::zero(), T::zero()); n_frames * n_bins];
        let mut frame = vec![Complex::new(T::zero(), T::zero()); self.n_fft];
        let half_win = self.win_len / 2;
        for fi in 0..n_frames {
            let center = fi * self.hop;
            frame.fill(Complex::new(T::zero(), T::zero()));
            // Window occupies the center of the (possibly longer) FFT frame.
            let frame_off = (self.n_fft - self.win_len) / 2;
            for (wi, &w) in self.window.iter().enumerate() {
                let src = center as isize + wi as isize - half_win as isize;
                if src < 0 || src >= samples.len() as isize {
                    continue;
                }
                frame[frame_off + wi] = Complex::new(samples[src as usize] * w, T::zero());
            }
            self.fft.process(&mut frame);
            // The zero-padding offset only rotates phase; magnitudes are
            // unaffected, and synthesis uses the matching full-size window.
            bins[fi * n_bins..(fi + 1) * n_bins].copy_from_slice(&frame[..n_bins]);
        }
        Ok(Spectrogram { bins, n_frames, n_bins, n_fft: self.n_fft, hop: self.hop, sample_rate })
    }

    pub fn analyze_audio(&self, audio: &AudioBuffer<T>) -> Result<Spectrogram<T>> {
        if audio.channels() != 1 {
            return Err(DspError::InvalidAudio("stft expects mono input".into()));
        }
        self.analyze(audio.samples(), audio.sample_rate())
    }

    /// Overlap-add synthesis with window-sum-square normalization. Output is
    /// trimmed/padded to `out_len` samples.
    pub fn synthesize(&self, spec: &Spectrogram<T>, out_len: usize) -> Vec<T> {
        assert_eq!(spec.n_fft, self.n_fft, "plan/spectrogram n_fft mismatch");
        assert_eq!(self.win_len, self.n_fft, "synthesis expects a full-size window");
        let n = spec.n_frames;
        let half = self.n_fft / 2;
        let mut acc = vec![T::zero(); (n - 1) * self.hop + self.n_fft + 1];
        let mut wsum = vec![T::zero(); acc.len()];
        let mut frame = vec![Complex::new(T::zero(), T::zero()); self.n_fft];
        let inv_n = T::f(1.0 / self.n_fft as f64);
        for fi in 0..n {
            // Rebuild the full conjugate-symmetric spectrum.
            for k in 0..spec.n_bins {
                frame[k] = spec.bin(fi, k);
            }
            for k in spec.n_bins..self.n_fft {
                frame[k] = spec.bin(fi, self.n_fft - k).conj();
            }
            self.ifft.process(&mut frame);
            let center = fi * self.hop;
            for wi in 0..self.n_fft {
                let dst = center as isize + wi as isize - half as isize;
                if dst < 0 {
                    continue;
                }
                let dst = dst as usize;
                if dst >= acc.len() {
                    break;
                }
                let w = self.window[wi];
                acc[dst] += frame[wi].re * inv_n * w;
                wsum[dst] += w * w;
            }
        }
        let floor = T::f(1e-8);
        let mut out = vec![T::zero(); out_len];
        for (i, o) in out.iter_mut().enumerate() {
            if i < acc.len() {
                *o = acc[i] / wsum[i].max(floor);
            }
        }
        out
    }
}

/// One-shot STFT with a Hann window.
pub fn stft<T: Sample>(audio: &AudioBuffer<T>, n_fft: usize, hop: usize) -> Result<Spectrogram<T>> {
    StftPlan::new(n_fft, hop)?.analyze_audio(audio)
}
