//! Referring video object segmentation as mask classification.
//!
//! A clip and a text query go through toy visual/text encoders, a
//! transformer cross-modal alignment stage that produces `K` candidate object
//! queries, and a mask decoder made of two stacked transformers. Each
//! candidate yields a mask sequence and per-frame referring scores; training
//! matches candidates to ground truth with the Hungarian algorithm.
//!
//! Everything runs on a small reverse-mode autodiff engine in [`autodiff`].

pub mod alignment;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod hungarian;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
