//! Data files, checkpoints, metrics, and synthetic dataset generation.

pub mod checkpoint;
pub mod config;
pub mod matrix_file;
pub mod metrics;
pub mod synth;
