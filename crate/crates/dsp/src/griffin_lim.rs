//! Phase retrieval from log-mel spectrograms: mel → linear magnitude by
//! multiplicative NNLS against the filterbank, then Griffin-Lim iterations.

use num_complex::Complex;

use muc_core::Tensor;

use crate::audio::AudioBuffer;
use crate::error::{DspError, Result};
use crate::mel::{mel_filterbank, MelConfig, MelSpec};
use crate::stft::{Spectrogram, StftPlan};
use crate::Sample;

/// Invert a log-mel matrix to linear spectrogram magnitudes.
///
/// Multiplicative-update NNLS: s ← s ⊙ (Mᵀ m) / (Mᵀ M s), initialized from the
/// transpose projection. Keeps magnitudes non-negative by construction.
pub fn mel_to_linear<T: Sample>(mel: &MelSpec<T>, nnls_iters: usize) -> Tensor<T> {
    let cfg = MelConfig {
        n_fft: mel.n_fft,
        hop: mel.hop,
        n_mels: mel.n_mels,
        ..MelConfig::default()
    };
    let fb = mel_filterbank::<T>(&cfg, mel.sample_rate); // (n_mels × n_bins)
    let (n_mels, n_bins) = fb.dims2();
    let n_frames = mel.n_frames();

    // Undo the log compression.
    let m = Tensor::from_vec(
        vec![n_frames, n_mels],
        mel.frames.data().iter().map(|&v| v.exp()).collect(),
    );

    // Init: s = m · M, normalized per filter column mass.
    let mut col_mass = vec![T::f(1e-12); n_bins];
    for mi in 0..n_mels {
        for (k, cm) in col_mass.iter_mut().enumerate() {
            *cm += fb.at2(mi, k);
        }
    }
    let mut s = muc_core::matmul(&m, &fb);
    for fi in 0..n_frames {
        for k in 0..n_bins {
            let v = s.at2(fi, k) / col_mass[k];
            s.data_mut()[fi * n_bins + k] = v;
        }
    }

    let eps = T::f(1e-12);
    for _ in 0..nnls_iters {
        // m_hat = s · Mᵀ ;  num = (m / m_hat) · M ;  s ⊙= num
        let m_hat = muc_core::matmul_nt(&s, &fb);
        let mut ratio = Tensor::zeros(vec![n_frames, n_mels]);
        for i in 0..n_frames * n_mels {
            ratio.data_mut()[i] = m.data()[i] / (m_hat.data()[i] + eps);
        }
        let num = muc_core::matmul(&ratio, &fb);
        // Normalize by column mass so a perfect fit is a fixed point.
        for fi in 0..n_frames {
            for k in 0..n_bins {
                let upd = num.at2(fi, k) / col_mass[k];
                let v = s.at2(fi, k) * upd;
                s.data_mut()[fi * n_bins + k] = v;
            }
        }
    }
    s
}

/// Relative L2 distance between a target magnitude and a re-analysis.
pub fn spectral_convergence<T: Sample>(target: &Tensor<T>, actual: &Spectrogram<T>) -> f64 {
    let (frames, bins) = target.dims2();
    let n = frames.min(actual.n_frames);
    let mut num = 0.0f64;
    let mut den = 1e-20f64;
    for fi in 0..n {
        for k in 0..bins {
            let t = target.at2(fi, k).to64();
            let a = actual.magnitude(fi, k).to64();
            num += (t - a) * (t - a);
            den += t * t;
        }
    }
    (num / den).sqrt()
}

/// Reconstruct audio from a log-mel spectrogram.
///
/// Zero initial phase, `iterations` rounds of magnitude-projected
/// analysis/synthesis. Output length is n_frames·hop samples.
pub fn griffin_lim<T: Sample>(mel: &MelSpec<T>, iterations: usize) -> Result<AudioBuffer<T>> {
    if iterations < 1 {
        return Err(DspError::InvalidArg("griffin_lim needs at least 1 iteration".into()));
    }
    let target = mel_to_linear(mel, 20);
    let (n_frames, n_bins) = target.dims2();
    let plan = StftPlan::<T>::new(mel.n_fft, mel.hop)?;
    assert_eq!(n_bins, plan.n_bins());
    let out_len = mel.n_frames() * mel.hop;

    // Zero phase start: spectrum = magnitudes, purely real.
    let mut spec = Spectrogram {
        bins: target.data().iter().map(|&m| Complex::new(m, T::zero())).collect(),
        n_frames,
        n_bins,
        n_fft: mel.n_fft,
        hop: mel.hop,
        sample_rate: mel.sample_rate,
    };

    let mut samples = plan.synthesize(&spec, out_len);
    for _ in 0..iterations {
        let analyzed = plan.analyze(&samples, mel.sample_rate)?;
        let n = analyzed.n_frames.min(n_frames);
        for fi in 0..n {
            for k in 0..n_bins {
                let c = analyzed.bin(fi, k);
                let mag = c.norm();
                let t = target.at2(fi, k);
                spec.bins[fi * n_bins + k] = if mag.to64() > 1e-12 {
                    c * (t / mag)
                } else {
                    Complex::new(t, T::zero())
                };
            }
        }
        samples = plan.synthesize(&spec, out_len);
    }
    AudioBuffer::mono(samples, mel.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mel::{mel_spectrogram, LOG_FLOOR};

    #[test]
    fn rejects_zero_iterations() {
        let audio = AudioBuffer::mono(vec![0.0f64; 2400], 24000).unwrap();
        let mel = mel_spectrogram(&audio).unwrap();
        assert!(griffin_lim(&mel, 0).is_err());
    }

    #[test]
    fn silence_reconstructs_near_silent() {
        let audio = AudioBuffer::mono(vec![0.0f64; 12000], 24000).unwrap();
        let mel = mel_spectrogram(&audio).unwrap();
        let rec = griffin_lim(&mel, 4).unwrap();
        assert!(rec.rms() < 1e-3, "rms {}", rec.rms());
    }

    #[test]
    fn pure_tone_keeps_its_dominant_mel_bin() {
        let sr = 24000u32;
        let f = 660.0f64;
        let samples: Vec<f64> = (0..sr as usize)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / sr as f64).sin() * 0.4)
            .collect();
        let audio = AudioBuffer::mono(samples, sr).unwrap();
        let mel = mel_spectrogram(&audio).unwrap();
        let rec = griffin_lim(&mel, 12).unwrap();
        let mel_rec = mel_spectrogram(&rec).unwrap();

        let mid = mel.n_frames() / 2;
        let argmax = |m: &MelSpec<f64>, fi: usize| {
            m.frames
                .row(fi)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0 as isize
        };
        let want = argmax(&mel, mid);
        let got = argmax(&mel_rec, mid.min(mel_rec.n_frames() - 1));
        assert!((want - got).abs() <= 1, "want {want}, got {got}");
    }

    #[test]
    fn more_iterations_reduce_spectral_convergence_error() {
        // Fixed chirp-ish clip: 60 iterations beat 5.
        let sr = 24000u32;
        let samples: Vec<f64> = (0..sr as usize / 2)
            .map(|i| {
                let t = i as f64 / sr as f64;
                (2.0 * std::f64::consts::PI * (300.0 + 600.0 * t) * t).sin() * 0.4
            })
            .collect();
        let audio = AudioBuffer::mono(samples, sr).unwrap();
        let mel = mel_spectrogram(&audio).unwrap();
        let target = mel_to_linear(&mel, 20);
        let plan = StftPlan::<f64>::new(mel.n_fft, mel.hop).unwrap();

        let err_of = |iters: usize| {
            let rec = griffin_lim(&mel, iters).unwrap();
            let spec = plan.analyze(rec.samples(), sr).unwrap();
            spectral_convergence(&target, &spec)
        };
        let e5 = err_of(5);
        let e60 = err_of(60);
        assert!(e60 < e5, "e60 {e60} vs e5 {e5}");
    }

    #[test]
    fn log_floor_matches_mel_module() {
        assert_eq!(LOG_FLOOR, 1e-5);
    }
}
