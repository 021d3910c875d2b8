//! Test-time training of a point-cloud segmentation network by distilling a frozen
//! 2D teacher through point↔pixel correspondences.

pub mod error;
pub mod eval;
pub mod rng;
pub mod scene;
pub mod segnet;
pub mod teacher;
pub mod tensor;
pub mod trainer;
pub mod ttt;

pub use error::{Error, Result};
