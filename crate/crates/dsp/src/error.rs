use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("empty audio")]
    EmptyAudio,

    #[error("unsupported sample rate {0} (supported: 16000, 24000, 48000)")]
    UnsupportedRate(u32),

    #[error("audio: {0}")]
    InvalidAudio(String),

    #[error("{0}")]
    InvalidArg(String),

    #[error("wav: {0}")]
    Wav(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;
