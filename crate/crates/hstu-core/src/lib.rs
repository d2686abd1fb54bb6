//! Sequential-recommendation model core built around hierarchical sequential
//! transduction units (HSTU) running on jagged, variable-length event
//! sequences.
//!
//! The crate provides, from the bottom up:
//!
//! - [`jagged`]: padding-free batches of variable-length sequences backed by a
//!   flat value buffer plus offsets.
//! - [`input`]: event sequences, embedding tables, and the merge of item and
//!   action embeddings into model input rows.
//! - [`sampling`]: stochastic length (SL) subsampling of long histories and
//!   its load-balanced variant (LBSL) that coordinates sampling decisions
//!   across data-parallel ranks.
//! - [`attention`]: pointwise (SiLU-scored) attention under full-causal or
//!   semi-local masks, with exact sparsity accounting.
//! - [`layer`]: the HSTU block (norm, fused UVQK projection, masked attention,
//!   gated norm, output projection, residual) with hand-derived backward
//!   passes in both a full-cache and a rematerializing minimal-cache variant.
//! - [`model`]: stage stacks with optional latest-only truncation between
//!   stages, mixture-of-transducers branch fusion, and per-task sigmoid heads.
//! - [`numerics`]: emulated FP8 (e4m3) row-wise quantized GEMMs and INT4
//!   group-wise embedding quantization.
//! - [`metrics`] and [`scaling`]: normalized entropy, exact FLOP accounting,
//!   and linear / power-law compute-scaling fits.
//! - [`checkpoint`] and [`dataset`]: named-tensor checkpoints and the JSONL
//!   event-sequence interchange format.
//!
//! All math is f64 and every backward pass is written by hand; finite
//! differences and independent oracles in the test suites keep them honest.
//! Batch-level loops run on rayon when the `parallel` feature (default) is
//! enabled and fall back to plain sequential iteration otherwise; results are
//! identical either way.

pub mod attention;
pub mod checkpoint;
pub mod dataset;
mod error;
pub mod input;
pub mod jagged;
pub mod layer;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod rng;
pub mod sampling;
pub mod scaling;

pub use error::{Error, Result};
pub use jagged::JaggedBatch;
pub use mat::Mat;
pub use par::Execution;
