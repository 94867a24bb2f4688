//! simcount-core: similarity-aware class-agnostic counting on synthetic
//! desk-scale scenes.
//!
//! The crate provides, bottom-up:
//!
//! - [`tensor`]: a dense-array substrate with reverse-mode differentiation
//!   and finite-difference verification;
//! - [`representation`]: a small convolutional backbone, scale embeddings,
//!   and a self-similarity (single-head attention) module;
//! - [`matching`]: the learnable bilinear similarity metric and its
//!   exemplar-conditioned dynamic variant;
//! - [`counting`]: feature fusion and the density-map counter head;
//! - [`losses`]: the l2 counting loss and the signal-to-noise similarity
//!   loss over labeled similarity maps;
//! - [`synthetic`]: a seeded generator of counting tasks with disjoint
//!   category splits;
//! - [`model`]: configuration, parameter registry, and the end-to-end
//!   forward pass;
//! - [`trainer`]: AdamW optimization, evaluation (MAE/RMSE), ablation and
//!   fusion-mode sweeps;
//! - [`verify`]: the self-check suite wired to the `verify` CLI command;
//! - [`io`]: task/report/checkpoint file formats.
//!
//! The `parallel` feature (default on) fans data-parallel sections out via
//! rayon; without it everything runs sequentially.

pub mod counting;
pub mod error;
pub mod io;
pub mod losses;
pub mod matching;
pub mod model;
pub mod parallel;
pub mod representation;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
