//! Super-resolution of multi-spectral mosaic images.
//!
//! The crate bundles a small reverse-mode autodiff engine, the residual
//! channel-attention backbone with an optional multi-scale feature
//! aggregation head, the 4x4 mosaic codec, losses and metrics, and a
//! deterministic training harness.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cubefile;
pub mod dataset;
pub mod error;
mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod mosaic;
pub mod ssim_kernel;
pub mod tensor;
pub mod train;

pub use autodiff::{Eager, Gradients, Graph, Tape, Var};
pub use layers::{param_count, ParamStore};
pub use model::{ForwardOutputs, Model, ModelConfig};
pub use error::{Error, ErrorClass, Result};
pub use tensor::{Shape, Tensor};
