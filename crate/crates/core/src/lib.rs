//! Context-to-LoRA hypernetwork.
//!
//! A frozen decoder-only backbone, augmented with a trainable Meta-LoRA, reads
//! a context followed by learnable memory embeddings. The hidden states of the
//! memory positions at every layer form an `L×M×H` memory tensor, which a small
//! transformer with alternating column (across layers) and row (across memory
//! tokens) attention turns into a full set of LoRA adapters for the backbone.
//!
//! The crate also carries the training recipe (reconstruction, completion and
//! answer-masked instruction tuning), an evaluation harness against naive,
//! in-context and fine-tuned baselines, and an exact analytic FLOPs/memory
//! cost model.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod costmodel;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hypernet;
pub mod optim;
pub mod template;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Matrix;
