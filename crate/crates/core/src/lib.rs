//! Knowledge distillation for 2D segmentation.
//!
//! A lightweight student learns from one frozen teacher or from an
//! adaptively weighted ensemble of teachers trained on disjoint site shards.
//! The objective combines a segmentation loss (soft Dice + Lovász-softmax)
//! with a KL prediction-distillation term and an intermediate-feature term
//! (importance maps + region contrast).
//!
//! Module map:
//!
//! - [`losses`]: temperature softmax, KL, soft Dice, Lovász-softmax, totals
//! - [`features`]: importance maps, region contrast, Mid loss
//! - [`ensemble`]: adaptive teacher weights and weighted aggregation
//! - [`models`]: adapter trait, reference encoder-decoders, checkpoints
//! - [`data`]: manifests, splitting, site shards, phantoms, batch loading
//! - [`train`]: cyclic LR, Adam, teacher training and distillation loops
//! - [`eval`]: Dice evaluation, parameter/FLOP counts, reports, overlays
//! - [`experiment`]: run configuration, overrides, protocol dry run

pub mod data;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod losses;
pub mod models;
pub mod nn;
pub mod resample;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{BinaryMask, LogitMap, ProbabilityMap};
