//! Memory-augmented adapters for frozen Transformer translation models.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape, Adam.
//! - [`nmt`]: vocabulary, the base encoder-decoder, teacher-forced forward
//!   with representation capture, beam search, base training, checkpoints.
//! - [`memory`]: phrase extraction from bracketed parses, back-translation
//!   into phrase pairs, layer partitioning, memory encoding, bank files.
//! - [`adapter`]: retrieval attention with gated fusion and its placement in
//!   decoder self- and cross-attention; a bottleneck adapter baseline.
//! - [`trainer`]: frozen-base plugin training with memory dropout and the
//!   full/dropped/agreement objective.
//! - [`knn`]: token-level datastore and interpolated decoding.

pub mod adapter;
pub mod container;
pub mod error;
pub mod knn;
pub mod memory;
pub mod nmt;
pub mod par;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
