//! Normalization layers and CTR models with hand-written backpropagation.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense row-major matrices and the seeded random stream.
//! - [`norm`]: BatchNorm, GroupNorm, LayerNorm, simple LayerNorm and
//!   variance-only LayerNorm, forward and backward.
//! - [`features`]: field schema, embedding tables and field-wise normalization.
//! - [`network`]: DNN / DeepFM / NormDNN assembly and checkpoints.
//! - [`train`]: loss, Adam, AUC and the epoch loop.
//! - [`data`]: TSV ingestion, vocabularies, 8:1:1 splits and the synthetic generator.
//! - [`probe`]: activation statistics recorder.
//! - [`experiment`]: config files and the run orchestration behind the CLI.

pub mod data;
pub mod error;
pub mod experiment;
pub mod features;
pub mod network;
pub mod norm;
pub mod numerics;
pub mod probe;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngStream};
