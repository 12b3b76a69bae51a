//! A small dense tensor engine with reverse-mode automatic differentiation.
//!
//! Ops are methods on [`Graph`]; each one computes its value eagerly and
//! records a backward closure on the tape. Custom ops with hand-derived
//! gradients plug into the same tape through [`register_custom_op`].

pub mod custom;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
mod ops;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use custom::{register_custom_op, CustomOp, Saved};
pub use error::{Result, TensorError};
pub use graph::{BackwardArgs, Graph, Var};
pub use nn::Ctx;
pub use ops::gather::Taps;
pub use ops::norm::BatchStats;
pub use params::ParamStore;
pub use scalar::Float;
pub use tensor::Tensor;
