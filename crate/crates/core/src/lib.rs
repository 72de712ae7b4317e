//! Local-descriptor metric learning at desk scale.
//!
//! The crate trains a small descriptor network on synthetic patch clusters
//! with hardest-in-batch triplet mining, a balance loss whose negative
//! potential well is placed dynamically from the batch statistics, a
//! self-supervised confidence weighting of mined negatives, and an
//! annealing schedule that feeds the model triplets of decreasing
//! difficulty. An evaluation harness reports FPR@95 and mAP metrics.

pub mod annealing;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod math;
pub mod mining;
pub mod model;
pub mod supervision;
pub mod train;

pub use error::{Error, Result};
