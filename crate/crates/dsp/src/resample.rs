//! Rational-rate resampling with a windowed-sinc polyphase filter.

use crate::audio::{AudioBuffer, SUPPORTED_RATES};
use crate::error::{DspError, Result};
use crate::Sample;

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        let t = b;
        b = a % b;
        a = t;
    }
    a
}

/// Blackman-windowed sinc taps for interpolation by `l` / decimation by `m`,
/// organized per output phase and normalized to unit DC gain per phase.
struct Polyphase {
    l: usize,
    m: usize,
    half_zc: usize,
    /// phases[p][k] weights x[base − k + half_zc], see `apply`.
    phases: Vec<Vec<f64>>,
}

impl Polyphase {
    fn design(l: usize, m: usize) -> Self {
        // Zero crossings per side at the input lattice; 16 gives > 80 dB
        // stopband with Blackman.
        let half_zc = 16usize;
        let cutoff = 0.45 / l.max(m) as f64; // cycles/sample at the upsampled rate
        let half_len = half_zc * l.max(m);
        let total = 2 * half_len + 1;
        let kernel = |i: isize| -> f64 {
            let x = i as f64;
            let sinc = if x == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * x).sin() / (std::f64::consts::PI * x)
            };
            let w = {
                let u = (x + half_len as f64) / (total - 1) as f64;
                let a = 2.0 * std::f64::consts::PI * u;
                0.42 - 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
            };
            sinc * w
        };
        // Output j sits at upsampled position j·m = i·l + p. The taps for
        // phase p weight input samples at upsampled offsets p + k·l.
        let mut phases = Vec::with_capacity(l);
        for p in 0..l {
            let mut taps = Vec::new();
            let mut k = -(half_zc as isize) - 1;
            while (k * l as isize + p as isize).unsigned_abs() as usize <= half_len || k <= half_zc as isize {
                let off = k * l as isize + p as isize;
                if off.unsigned_abs() as usize <= half_len {
                    taps.push(kernel(off));
                } else {
                    taps.push(0.0);
                }
                k += 1;
                if k > half_zc as isize + 1 {
                    break;
                }
            }
            // Unit DC gain per phase keeps constants exact.
            let sum: f64 = taps.iter().sum();
            if sum.abs() > 1e-12 {
                for t in taps.iter_mut() {
                    *t /= sum;
                }
            }
            phases.push(taps);
        }
        Polyphase { l, m, half_zc, phases }
    }

    fn output_len(&self, n: usize) -> usize {
        // Duration preserved within one output sample.
        (n * self.l + self.m / 2) / self.m
    }

    fn apply<T: Sample>(&self, x: &[T]) -> Vec<T> {
        let n_out = self.output_len(x.len());
        let mut out = Vec::with_capacity(n_out);
        for j in 0..n_out {
            let pos = j * self.m; // upsampled lattice
            let i0 = pos / self.l;
            let p = pos % self.l;
            let taps = &self.phases[p];
            let mut acc = 0.0f64;
            for (ti, &w) in taps.iter().enumerate() {
                // tap ti corresponds to k = ti − (half_zc + 1)
                let k = ti as isize - (self.half_zc as isize + 1);
                let src = i0 as isize - k;
                if src >= 0 && (src as usize) < x.len() {
                    acc += w * x[src as usize].to64();
                }
            }
            out.push(T::f(acc));
        }
        out
    }
}

/// Resample to `target_rate`. Identity rates return a bit-identical clone.
pub fn resample<T: Sample>(audio: &AudioBuffer<T>, target_rate: u32) -> Result<AudioBuffer<T>> {
    if !SUPPORTED_RATES.contains(&target_rate) {
        return Err(DspError::UnsupportedRate(target_rate));
    }
    if target_rate == audio.sample_rate() {
        return Ok(audio.clone());
    }
    let g = gcd(target_rate, audio.sample_rate());
    let l = (target_rate / g) as usize;
    let m = (audio.sample_rate() / g) as usize;
    let filter = Polyphase::design(l, m);
    let channels: Vec<Vec<T>> = (0..audio.channels() as usize)
        .map(|ch| filter.apply(&audio.channel(ch)))
        .collect();
    AudioBuffer::from_channels(&channels, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(f: f64, n: usize, sr: u32) -> AudioBuffer<f64> {
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / sr as f64).sin() * 0.5)
            .collect();
        AudioBuffer::mono(samples, sr).unwrap()
    }

    /// FFT peak with parabolic interpolation, in Hz.
    fn dominant_freq(audio: &AudioBuffer<f64>) -> f64 {
        use rustfft::FftPlanner;
        let n = audio.len_frames();
        let mut buf: Vec<num_complex::Complex<f64>> = audio
            .samples()
            .iter()
            .map(|&v| num_complex::Complex::new(v, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let half = n / 2;
        let mags: Vec<f64> = buf[..half].iter().map(|c| c.norm()).collect();
        let k = mags
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let (a, b, c) = (
            mags[k.saturating_sub(1)].max(1e-12).ln(),
            mags[k].ln(),
            mags[(k + 1).min(half - 1)].max(1e-12).ln(),
        );
        let denom = a - 2.0 * b + c;
        let delta = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
        (k as f64 + delta) * audio.sample_rate() as f64 / n as f64
    }

    #[test]
    fn identity_rate_is_bit_identical() {
        let audio = tone(500.0, 4800, 24000);
        let out = resample(&audio, 24000).unwrap();
        assert_eq!(out, audio);
    }

    #[test]
    fn tone_frequency_preserved_48k_to_24k() {
        let audio = tone(1000.0, 96000, 48000); // 2 s for sub-Hz FFT resolution
        let out = resample(&audio, 24000).unwrap();
        assert_eq!(out.sample_rate(), 24000);
        assert!((out.len_frames() as i64 - 48000).abs() <= 1);
        let f = dominant_freq(&out);
        assert!((f - 1000.0).abs() < 1.0, "measured {f} Hz");
    }

    #[test]
    fn upsampling_preserves_tone_too() {
        let audio = tone(700.0, 32000, 16000);
        let out = resample(&audio, 24000).unwrap();
        let f = dominant_freq(&out);
        assert!((f - 700.0).abs() < 1.0, "measured {f} Hz");
    }

    #[test]
    fn dc_preserved_within_1e4() {
        let audio = AudioBuffer::mono(vec![0.5f64; 9600], 48000).unwrap();
        let out = resample(&audio, 24000).unwrap();
        let margin = 40;
        for &v in &out.samples()[margin..out.len_frames() - margin] {
            assert!((v - 0.5).abs() < 1e-4, "sample {v}");
        }
    }

    #[test]
    fn rejects_unsupported_target() {
        let audio = tone(500.0, 2400, 24000);
        assert!(matches!(resample(&audio, 44100), Err(DspError::UnsupportedRate(44100))));
    }

    #[test]
    fn duration_preserved_within_one_sample() {
        for (from, to) in [(48000u32, 24000u32), (16000, 48000), (24000, 16000), (48000, 16000)] {
            let n = 48000usize;
            let audio = tone(440.0, n, from);
            let out = resample(&audio, to).unwrap();
            let expect = n as f64 * to as f64 / from as f64;
            assert!(
                (out.len_frames() as f64 - expect).abs() <= 1.0,
                "{from}->{to}: {} vs {expect}",
                out.len_frames()
            );
        }
    }
}
