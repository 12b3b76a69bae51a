//! Multi-camera images to a bird's-eye-view grid
//! through per-pixel depth distributions, plus a synthetic world to train
//! and test on.

pub mod bev_head;
pub mod camera;
pub mod error;
pub mod lift;
pub mod pipeline;
pub mod shoot;
pub mod splat;
pub mod synth;

pub use error::{CoreError, Result};
