use crate::error::{DspError, Result};
use crate::Sample;

pub const SUPPORTED_RATES: [u32; 3] = [16000, 24000, 48000];

/// PCM audio: interleaved samples in [-1, 1], 1 or 2 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer<T> {
    samples: Vec<T>,
    sample_rate: u32,
    channels: u16,
}

impl<T: Sample> AudioBuffer<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32, channels: u16) -> Result<Self> {
        if !SUPPORTED_RATES.contains(&sample_rate) {
            return Err(DspError::UnsupportedRate(sample_rate));
        }
        if channels != 1 && channels != 2 {
            return Err(DspError::InvalidAudio(format!("{channels} channels (want 1 or 2)")));
        }
        if samples.len() % channels as usize != 0 {
            return Err(DspError::InvalidAudio(format!(
                "{} samples not divisible by {channels} channels",
                samples.len()
            )));
        }
        Ok(AudioBuffer { samples, sample_rate, channels })
    }

    pub fn mono(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        Self::new(samples, sample_rate, 1)
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [T] {
        &mut self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> u16 {
        self.channels
    }

    /// Frames per channel.
    pub fn len_frames(&self) -> usize {
        self.samples.len() / self.channels as usize
    }

    pub fn duration_s(&self) -> f64 {
        self.len_frames() as f64 / self.sample_rate as f64
    }

    /// De-interleave one channel.
    pub fn channel(&self, ch: usize) -> Vec<T> {
        assert!(ch < self.channels as usize);
        let nch = self.channels as usize;
        self.samples.iter().skip(ch).step_by(nch).copied().collect()
    }

    /// Re-interleave per-channel signals of equal length.
    pub fn from_channels(channels: &[Vec<T>], sample_rate: u32) -> Result<Self> {
        let nch = channels.len();
        if nch == 0 || nch > 2 {
            return Err(DspError::InvalidAudio(format!("{nch} channels")));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(DspError::InvalidAudio("channel length mismatch".into()));
        }
        let mut samples = Vec::with_capacity(len * nch);
        for i in 0..len {
            for c in channels {
                samples.push(c[i]);
            }
        }
        Self::new(samples, sample_rate, nch as u16)
    }

    pub fn peak(&self) -> T {
        self.samples.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sq: f64 = self.samples.iter().map(|&v| v.to64() * v.to64()).sum();
        (sq / self.samples.len() as f64).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.samples.iter().all(|v| v.is_finite())
    }

    /// Scale so the peak is at most `target` (no-op for quieter signals).
    pub fn normalize_peak(&mut self, target: f64) {
        let peak = self.peak().to64();
        if peak > target && peak > 0.0 {
            let s = T::f(target / peak);
            for v in &mut self.samples {
                *v = *v * s;
            }
        }
    }
}
