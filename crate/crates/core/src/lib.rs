//! Multimodal machine translation in which the source-text encoder modulates a
//! residual image network through conditional batch normalization.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithmic piece:
//! a small reverse-mode tensor tape, the text encoder, the mini-ResNet with
//! (conditional) batch normalization, the three attention mechanisms, the
//! conditional-GRU decoder with beam search, BPE and batching, the synthetic
//! ambiguous corpus, and the training loop. File formats, checkpoints and the
//! command line live in the `mmt` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod math;
pub mod model;
pub mod param;
pub mod tensor;
pub mod train;
pub mod vision;

pub use config::{ModelConfig, RunVariant};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::Model;
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
