//! Single-image vehicle pose and shape reconstruction from 2D keypoints.

pub mod adjust;
pub mod align;
pub mod cli;
pub mod config;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod io;
pub mod lm;
pub mod mesh;
pub mod metrics;
pub mod pose;
pub mod prior;
pub mod synth;

pub use error::{Error, Result};
