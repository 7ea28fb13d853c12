//! Dense-tensor numeric core: reverse-mode autodiff, Adam, and the neural
//! building blocks (linear, convolution, multi-head attention, layer/group
//! norm, GELU/SiLU) shared by every learned module in the workspace.
//!
//! Everything is generic over the [`Scalar`] element type — f32 for training,
//! f64 wherever finite-difference headroom matters.

mod adam;
mod ckpt;
mod error;
mod graph;
mod linalg;
mod nn;
mod scalar;
mod tensor;

pub mod check;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use ckpt::{
    load as load_checkpoint, load_meta as load_checkpoint_meta, save as save_checkpoint,
    CKPT_MAGIC, CKPT_VERSION,
};
pub use error::{CoreError, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use linalg::{conv1d_out_len, conv_transpose1d_out_len, gemm_into, matmul, matmul_nt};
pub use nn::{
    kaiming_uniform, l1_loss, linear, linear_apply, linear_init, mse_loss, multihead_attention,
    multihead_attention_with_weights, normal_init, sinusoid_table, xavier_uniform, AttnParams,
    Bound, ParamStore,
};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

/// Concrete aliases for the two supported element types.
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
