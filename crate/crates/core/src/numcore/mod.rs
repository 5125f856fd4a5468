//! Minimal dense kernel with explicit reverse-mode gradients.
//!
//! Each differentiable operation comes as a forward function returning its
//! output (plus a cache where needed) and a matching `*_backward` function.
//! Callers compose them by hand; the model graph is static and shallow.

mod attention;
mod checkpoint;
mod gradcheck;
mod layers;
mod ops;
mod params;
mod tensor;

pub use attention::{attention, attention_backward, AttentionCache, AttentionGrads, MASKED_SCORE};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use gradcheck::{grad_check, rel_err, GradCheckReport, ParamCheck, FD_STEP, REL_ERR_FLOOR};
pub use layers::{AttentionBlock, AttentionBlockCache, FeedForward, FeedForwardCache, LayerNorm, Linear};
pub use ops::{
    affine, affine_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, sigmoid,
    sigmoid_backward, sigmoid_scalar, softmax_rows, softmax_rows_backward, AffineGrads,
    LayerNormCache, LayerNormGrads, LAYER_NORM_EPS,
};
pub use params::{adam_step, AdamConfig, AdamState, Param, ParamStore};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor2};
