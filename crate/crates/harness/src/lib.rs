//! Synthetic style-transfer task, metrics, and experiment runners for memplug.

pub mod ablation;
pub mod metrics;
pub mod pipeline;
pub mod synth;
