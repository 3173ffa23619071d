//! Multimodal transformer network with multi-source pointer-generation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense matrices and a reverse-mode differentiation tape
//! - [`attention`]: multi-head attention blocks and progressive rounds
//! - [`model`]: query-guided encoder, cascaded decoder, checkpoints
//! - [`pointer`]: pointer distributions over source texts and their mixture
//! - [`training`]: losses, initialization, Adam with warmup, the epoch loop
//! - [`decoding`]: beam search and distribution-level ensembling
//! - [`metrics`]: BLEU, ROUGE-L and CIDEr-D
//! - [`data`]: tokenization, vocabularies, file formats, synthetic corpora
//! - [`cli`]: run configuration and the command implementations

pub mod attention;
pub mod cli;
pub mod data;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pointer;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, Tensor, Var};
