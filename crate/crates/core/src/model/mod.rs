//! The two-branch network: chunking, Encoder / Fusion-Encoder chains,
//! fusion heads and attention reports.

mod config;
mod network;
mod report;

pub use config::{Fusion, ModelConfig, Task, LOS_BUCKETS, N_PHENOTYPES};
pub use network::{
    block_prefix, branch_forward, branch_inputs, chunk_sample, encoder_forward, fuse_and_predict,
    fusion_encoder_forward, sidecar_path, BlockTrace, Branch, BranchLayout, BranchState, Forward,
    Tscan,
};
pub use report::{attention_report, AttentionReport, ReportMetadata};
