use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("core: {0}")]
    Core(#[from] muc_core::CoreError),

    #[error("dsp: {0}")]
    Dsp(#[from] muc_dsp::DspError),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("rvq: {0}")]
    Rvq(String),

    #[error("bitstream: {0}")]
    Bitstream(String),

    #[error("truncated payload")]
    TruncatedPayload,

    #[error("stream corrupt: {0}")]
    Corrupt(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` requires checkpoint from `{missing}`; run that stage first")]
    MissingStage { stage: String, missing: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("pipeline [{stage}]: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CodecError>,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CodecError {
    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &str) -> CodecError {
        CodecError::Stage { stage: stage.to_string(), source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, CodecError>;
