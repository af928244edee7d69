//! One-click ("tap-and-shoot") interactive instance segmentation with
//! multi-stage fusion of the click guidance.

pub mod checkpoint;
pub mod clicks;
pub mod data;
pub mod error;
pub mod guidance;
pub mod inference;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
