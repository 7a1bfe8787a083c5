//! Unpaired MRI-to-CT translation with a Schrödinger bridge, joint ventricle
//! segmentation and the evaluation harness around them.

pub mod bridge;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image;
mod nn;
pub mod phantom;
pub mod seg;
pub mod train;

pub use error::{Error, Result};
