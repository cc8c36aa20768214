//! Neural-network primitives with explicit forward and backward passes.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod loss;
pub mod lstm;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_richardson, relative_error};
pub use init::xavier_init;
pub use layers::{
    dropout, dropout_backward, embedding_backward, embedding_lookup, layer_norm, layer_norm_backward, linear,
    linear_backward, sigmoid, Activation, LayerNormCache,
};
pub use loss::{masked_bce, masked_bce_logits, softmax_cross_entropy};
pub use lstm::{bilstm, bilstm_backward, BiLstmCache, BiLstmParams};
pub use optim::{clip_global_norm, warmup_linear_lr, AdamW};
pub use params::{Grads, Param, ParamId, ParameterStore};
pub use tensor::{Scalar, Tensor};
