//! Core engine for anticipation-style video question answering at desk
//! scale: a tape-based reverse-mode autodiff graph over `f64` tensors, plus
//! the model blocks built on it — a bidirectional GRU frame encoder, a gated
//! cross-modal fusion block, a LoRA-adapted causal decoder — and the glue
//! (parameter storage, gradient checking, checkpointing, text
//! normalization) needed to train and probe them deterministically.
//!
//! Everything is seeded and single-threaded; identical inputs reproduce
//! identical bits, which the test suites lean on heavily.

pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod gru;
pub mod lora;
pub mod model;
pub mod param;
pub mod text;
pub mod verify;

pub use error::{CoreError, Result};
pub use graph::{Graph, TensorId};
pub use param::{Bindings, Param};
