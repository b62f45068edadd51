//! Methane plume segmentation toolkit.
//!
//! Spectral indexing, an attention-gated U-Net trained with reverse-mode
//! autodiff, focal/BCE losses, the multi-band multi-pass retrieval baseline,
//! synthetic scene generation and the scene/pixel evaluation protocol.

pub mod data;
pub mod engine;
pub mod error;
pub mod loss;
pub mod mbmp;
pub mod metrics;
pub mod model;
pub mod spectral;
pub mod train;

pub use engine::{backward, grad_check, Graph, Mode, Tensor, Var};
pub use error::{Error, Result};
