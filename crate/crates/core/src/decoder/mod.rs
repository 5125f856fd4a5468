//! Inner-instance query fusion, masked inner-instance self-attention and the
//! decoder layer/stack built around them.

mod fusion;
mod layer;
mod mask;

pub use fusion::{fuse_queries, FusionCache, FusionMode, QueryFusion};
pub use layer::{Decoder, DecoderLayer, DecoderLayerCache, DecoderOutput, MaskMode, Placement};
pub use mask::{build_instance_mask, AttentionMask, MaskConfig};
