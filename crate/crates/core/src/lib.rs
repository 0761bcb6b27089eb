//! Sensorless freehand ultrasound tracking: geometry, metrics, synthetic
//! data, dual-encoder networks and staged training.

pub mod checkpoint;
pub mod compound;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod reconstruct;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
