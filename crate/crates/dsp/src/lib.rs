//! Signal-processing front- and back-end: WAV I/O, resampling, STFT, log-mel
//! and pseudo constant-Q features, and Griffin-Lim phase reconstruction.
//!
//! All operations are pure functions of their inputs and safe to call
//! concurrently on distinct data.

mod audio;
mod cqt;
mod error;
mod griffin_lim;
mod mel;
mod resample;
mod stft;
mod wav;

pub use audio::{AudioBuffer, SUPPORTED_RATES};
pub use cqt::{cqt, cqt_cfg, cqt_filterbank, CqtConfig, CqtSpec};
pub use error::{DspError, Result};
pub use griffin_lim::{griffin_lim, mel_to_linear, spectral_convergence};
pub use mel::{
    apply_log_filterbank, hz_to_mel, mel_filterbank, mel_spectrogram, mel_spectrogram_cfg,
    mel_to_hz, MelConfig, MelSpec, LOG_FLOOR,
};
pub use resample::resample;
pub use stft::{hann_window, stft, Spectrogram, StftPlan};
pub use wav::{read_wav, write_wav, write_wav_pcm16};

/// Scalar type audio processing is generic over (f32 or f64).
pub trait Sample: muc_core::Scalar + rustfft::FftNum {}

impl Sample for f32 {}
impl Sample for f64 {}
