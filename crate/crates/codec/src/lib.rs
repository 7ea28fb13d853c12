//! Ultra low-bitrate music codec: Conformer feature extraction, residual
//! vector quantization to an exact-bitrate bitstream, and flow-matching
//! latent reconstruction, with a synthetic desk-scale corpus for training
//! and evaluation.

pub mod bitstream;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flowgen;
pub mod melvae;
mod model_io;
pub mod muencoder;
pub mod pipeline;
pub mod rvq;

pub use error::{CodecError, Result};

/// Training dtype used by the CLI default path.
pub type TrainReal = f32;
/// High-precision dtype used by gradient checks and oracles.
pub type CheckReal = f64;
