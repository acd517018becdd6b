//! A from-scratch, CPU-only implementation of a two-branch multi-scale
//! convolutional network for person re-identification: reverse-mode
//! automatic differentiation over dense tensors, the layer zoo the
//! architecture needs, saliency-based stream fusion, a three-stage training
//! schedule, and single-shot CMC evaluation.
//!
//! Start with the runnable programs in `examples/`; the `mudeep` binary
//! wraps the same entry points as subcommands.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod param;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, MuDeep};
pub use tensor::{Scalar, Tensor};
