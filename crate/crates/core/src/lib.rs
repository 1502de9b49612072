//! Bitwise multi-scale residual tokenization and token-space image editing.
//!
//! The pipeline mirrors a next-scale autoregressive image model at toy scale:
//!
//! * [`codec`] maps grayscale images to feature grids and back (exact bijection),
//! * [`bsq`] quantizes feature grids into per-scale binary token maps,
//! * [`predictor`] is a small trainable next-scale predictor with per-bit heads,
//! * [`inversion`] fits a learnable prompt and low-rank FFN adapters to a source image,
//! * [`editor`] regenerates tokens under a new prompt and blends them with the
//!   source tokens under a [`smoothing`] kernel,
//! * [`metrics`] scores the result.
//!
//! Everything is deterministic given explicit seeds.

pub mod bsq;
pub mod cli;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod editor;
pub mod error;
pub mod formats;
pub mod grid;
pub mod inversion;
pub mod metrics;
pub mod optim;
pub mod predictor;
pub mod smoothing;
pub mod tensor;

pub use error::{Error, Result};
