//! Desk-scale vision-language model for medical visual question answering.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: `f64` tensors, a reverse-mode tape, finite-difference checks.
//! * [`nn`]: attention, feed-forward and transformer blocks.
//! * [`lora`]: low-rank adapters on linear maps, with merge.
//! * [`model`]: patch-based image encoder, projector and causal decoder fused by an image prefix.
//! * [`optim`]: AdamW and the warmup + cosine learning-rate schedule.
//! * [`data`]: VQA records, multiple-choice reformulation, stratified splits,
//!   byte tokenizer and a synthetic shape dataset.
//! * [`train`]: staged training, checkpoints and loss logs.
//! * [`eval`]: exact-match scoring with per-type and per-modality breakdowns.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod lora;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{Tape, Tensor, Var};
