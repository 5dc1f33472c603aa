//! Spectral analysis and spectral-norm control for affine layers.
//!
//! Layers are described by [`OperatorSpec`] values and are only ever touched
//! through forward, adjoint and parameter-gradient products, so convolutions
//! of any padding or stride work without building their matrices.

pub mod clipping;
pub mod closedform;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod linops;
pub mod rng;
pub mod specmod;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use linops::{OperatorSpec, ParamDelta};
pub use tensor::Tensor;
