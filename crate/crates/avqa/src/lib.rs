//! Anticipation question answering at desk scale: dataset construction
//! from frame-level annotations, training of a gated cross-attention
//! model over clip features, reference-based evaluation, and a seeded
//! synthetic experiment that exercises the whole pipeline.

pub mod annotations;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod metrics;
pub mod taxonomy;
pub mod templates;
pub mod train;
