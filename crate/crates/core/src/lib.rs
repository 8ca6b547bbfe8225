//! Guidewire segmentation under domain shift: a procedural source simulator
//! and compositor, a promptable segmentation network with low-rank adapters,
//! DBSCAN pseudo-labeling, and a two-stage coarse-to-fine teacher/student
//! training pipeline.

pub mod augment;
pub mod autograd;
pub mod config;
pub mod dataset;
pub mod dbscan;
pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod prompt;
pub mod pseudo_label;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
