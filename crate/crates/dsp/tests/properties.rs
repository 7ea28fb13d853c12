//! Property tests for the spectral front-end.

use muc_dsp::{cqt, mel_spectrogram, AudioBuffer, MelConfig};
use proptest::prelude::*;

fn small_signal() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 4800..9600)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Shifting the input by exactly one hop shifts interior mel frames by
    /// one index (edge frames excluded).
    #[test]
    fn mel_is_time_equivariant(samples in small_signal()) {
        let cfg = MelConfig::default();
        let hop = cfg.hop;
        let mut shifted = vec![0.0; hop];
        shifted.extend_from_slice(&samples);

        let a = mel_spectrogram(&AudioBuffer::mono(samples, 24000).unwrap()).unwrap();
        let b = mel_spectrogram(&AudioBuffer::mono(shifted, 24000).unwrap()).unwrap();

        // Frame i of the original aligns with frame i+1 of the shifted copy.
        let margin = cfg.n_fft / hop + 1;
        for fi in margin..a.n_frames() - margin {
            let ra = a.frames.row(fi);
            let rb = b.frames.row(fi + 1);
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() < 1e-9, "frame {} differs: {} vs {}", fi, x, y);
            }
        }
    }

    /// Same property for the constant-Q features (wider analysis window, so a
    /// wider edge margin).
    #[test]
    fn cqt_is_time_equivariant(samples in small_signal()) {
        let hop = 240usize;
        let mut shifted = vec![0.0; hop];
        shifted.extend_from_slice(&samples);

        let a = cqt(&AudioBuffer::mono(samples, 24000).unwrap()).unwrap();
        let b = cqt(&AudioBuffer::mono(shifted, 24000).unwrap()).unwrap();

        let margin = 2048 / hop + 1;
        for fi in margin..a.n_frames() - margin {
            let ra = a.frames.row(fi);
            let rb = b.frames.row(fi + 1);
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() < 1e-9, "frame {} differs", fi);
            }
        }
    }

    /// The log floor keeps every spectral output finite for finite input.
    #[test]
    fn spectral_outputs_are_finite(samples in prop::collection::vec(-1.0f64..1.0, 2400..4800)) {
        let audio = AudioBuffer::mono(samples, 24000).unwrap();
        let mel = mel_spectrogram(&audio).unwrap();
        prop_assert!(mel.frames.data().iter().all(|v| v.is_finite()));
        let c = cqt(&audio).unwrap();
        prop_assert!(c.frames.data().iter().all(|v| v.is_finite()));
    }
}
