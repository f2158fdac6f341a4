//! Self-configuring segmentation pipeline engine.
//!
//! Given a dataset of volumetric images with voxel-wise labels, the engine
//! fingerprints the data, derives network topologies and preprocessing
//! settings from that fingerprint, and runs a cross-validated
//! train/predict/evaluate loop with swappable toy predictors standing in for
//! the heavy network weights. Every stage reads and writes plain files so
//! each step is inspectable and resumable.

pub mod augment;
pub mod cv;
pub mod descriptor;
pub mod error;
pub mod fingerprint;
pub mod inference;
pub mod interp;
pub mod losskit;
pub mod planner;
pub mod postprocess;
pub mod predictors;
pub mod preprocess;
pub mod report;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
