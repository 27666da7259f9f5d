//! Standard and one-to-many cross-attention, the fusion block, and operation counts.

pub mod flops;
pub mod fusion;
pub(crate) mod kernels;
pub mod otm;
pub mod standard;

pub use flops::{flop_count, FlopReport, Variant};
pub use fusion::{fusion_attention, fusion_block, fusion_conv, init_fusion_attention, init_fusion_conv};
pub use otm::{one_to_many_attention, one_to_many_graph, OtmAttnParams};
pub use standard::{standard_cross_attention, StdAttnParams};
