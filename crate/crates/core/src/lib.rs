//! Monocular 3D object detection with auxiliary depth features.
pub mod adf;
pub mod bev;
pub mod cli;
pub mod config;
pub mod dft;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod kitti;
pub mod lid;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
